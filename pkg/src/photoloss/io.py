"""File formats: PFM depth maps, PNG frames, TUM trajectories, atomic writes."""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import InvalidArgument, ParseError
from .evaluation import Trajectory


def atomic_write(path, data: bytes):
    """Write ``data`` to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


def encode_pfm(arr) -> bytes:
    """Greyscale ("Pf") or colour ("PF") PFM, little-endian float32, rows bottom-up."""
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise InvalidArgument(f"PFM holds HxW or HxWx3 arrays, got shape {arr.shape}")
    h, w = arr.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    return header + np.ascontiguousarray(np.flipud(arr), dtype="<f4").tobytes()


def write_pfm(path, arr):
    atomic_write(path, encode_pfm(arr))


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ParseError(f"{path}: not a PFM file", line=1)
        dims = f.readline().split()
        if len(dims) != 2:
            raise ParseError(f"{path}: bad PFM size line", line=2)
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ParseError(f"{path}: expected {w * h * channels} values, found {data.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, img, bits=8):
    """Save an image with values in [0, 1] as an 8- or 16-bit PNG."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if bits == 8:
        pil = Image.fromarray(np.round(img * 255).astype(np.uint8))
    elif bits == 16:
        if img.ndim != 2:
            raise InvalidArgument("16-bit PNG output supports single-channel images only")
        pil = Image.fromarray(np.round(img * 65535).astype(np.uint16))
    else:
        raise InvalidArgument("PNG bit depth must be 8 or 16")
    tmp = Path(path).with_name(f".{Path(path).name}.tmp")
    pil.save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    scale = 65535.0 if arr.dtype == np.uint16 or arr.dtype == np.int32 else 255.0
    return arr.astype(np.float64) / scale


def write_depth_png16(path, depth, scale):
    """16-bit depth PNG storing ``round(depth * scale)``."""
    q = np.round(np.asarray(depth, dtype=np.float64) * scale)
    if q.min() < 0 or q.max() > 65535:
        raise InvalidArgument("depth does not fit a 16-bit PNG at this scale")
    tmp = Path(path).with_name(f".{Path(path).name}.tmp")
    Image.fromarray(q.astype(np.uint16)).save(tmp, format="PNG")
    os.replace(tmp, path)


def _fmt(v):
    return f"{v + 0.0:.9g}"  # + 0.0 turns -0.0 into 0.0


def format_tum(traj: Trajectory) -> str:
    lines = ["# index tx ty tz qx qy qz qw"]
    for idx, T in zip(traj.indices, traj.matrices):
        q = Rotation.from_matrix(T[:3, :3]).as_quat()
        if q[3] < 0:
            q = -q
        vals = [*T[:3, 3], *q]
        lines.append(" ".join([str(int(idx)) if float(idx).is_integer() else _fmt(idx)] + [_fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


def write_tum(path, traj: Trajectory):
    write_text(path, format_tum(traj))


_COMMENT = re.compile(r"#.*")


def parse_tum(text: str, source="<string>") -> Trajectory:
    indices, mats = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{source}: expected 8 fields, found {len(parts)}", line=lineno)
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(f"{source}: {exc}", line=lineno) from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"{source}: non-finite value", line=lineno)
        q = np.array(vals[4:8])
        if not np.linalg.norm(q) > 0:
            raise ParseError(f"{source}: zero quaternion", line=lineno)
        T = np.eye(4)
        T[:3, :3] = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
        T[:3, 3] = vals[1:4]
        if indices and vals[0] <= indices[-1]:
            raise ParseError(f"{source}: frame indices must increase", line=lineno)
        indices.append(vals[0])
        mats.append(T)
    if not mats:
        raise ParseError(f"{source}: no poses found")
    idx = np.asarray(indices)
    if np.all(idx == np.round(idx)):
        idx = idx.astype(np.int64)
    return Trajectory(idx, np.stack(mats))


def read_tum(path) -> Trajectory:
    return parse_tum(Path(path).read_text(), source=str(path))
