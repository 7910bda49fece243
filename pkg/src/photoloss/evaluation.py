"""Depth and trajectory evaluation: scale-aligned depth errors and APE.

Depth predictions are up to scale and are aligned with a single least-squares
scale over the whole sequence before computing errors. Trajectories are split
into fixed-length segments, each aligned to the reference with Umeyama's
similarity fit, and per-frame rotation/translation errors are pooled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import AlignmentError, InvalidArgument
from .geometry import Pose

DEFAULT_SEGMENT_LEN = 150


def _as_depth_stack(maps):
    if isinstance(maps, (np.ndarray, torch.Tensor)) and maps.ndim == 2:
        maps = [maps]
    arrs = [np.asarray(m.detach().numpy() if isinstance(m, torch.Tensor) else m, dtype=np.float64) for m in maps]
    if not arrs:
        raise InvalidArgument("empty depth sequence")
    return arrs


def _check_pairs(pred, ref):
    if len(pred) != len(ref):
        raise InvalidArgument(f"{len(pred)} predicted depth maps vs {len(ref)} reference maps")
    for i, (p, r) in enumerate(zip(pred, ref)):
        if p.shape != r.shape:
            raise InvalidArgument(f"frame {i}: shape {p.shape} vs {r.shape}")
        if not (np.all(p > 0) and np.all(r > 0)):
            raise InvalidArgument(f"frame {i}: depths must be positive")


def align_depth_scale(pred, ref) -> float:
    """Scale ``s`` minimising ``sum (s * pred - ref)^2`` over every pixel of every frame."""
    pred, ref = _as_depth_stack(pred), _as_depth_stack(ref)
    _check_pairs(pred, ref)
    num = sum(float(np.sum(r * p)) for p, r in zip(pred, ref))
    den = sum(float(np.sum(p * p)) for p in pred)
    return num / den


@dataclass(frozen=True)
class DepthMetrics:
    rel_mean: float
    rel_max: float
    rel_median: float
    acc_1: float
    acc_2: float
    acc_3: float
    scale: float
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, ref, scale=None, per_frame=False) -> DepthMetrics:
    """Relative error statistics and ``delta < 1.25^k`` accuracies.

    ``scale=None`` aligns with :func:`align_depth_scale` (one global factor, or
    one per frame when ``per_frame``); a number forces that scale.
    """
    pred, ref = _as_depth_stack(pred), _as_depth_stack(ref)
    _check_pairs(pred, ref)
    if scale is not None:
        scales = [float(scale)] * len(pred)
    elif per_frame:
        scales = [align_depth_scale([p], [r]) for p, r in zip(pred, ref)]
    else:
        scales = [align_depth_scale(pred, ref)] * len(pred)
    rel, delta = [], []
    for s, p, r in zip(scales, pred, ref):
        p = s * p
        rel.append((np.abs(p - r) / r).ravel())
        delta.append(np.maximum(r / p, p / r).ravel())
    rel = np.concatenate(rel)
    delta = np.concatenate(delta)
    acc = [float(np.mean(delta < 1.25**k)) for k in (1, 2, 3)]
    mean, mx, med = float(rel.mean()), float(rel.max()), float(np.median(rel))
    return DepthMetrics(rel_mean=mean, rel_max=mx, rel_median=med, acc_1=acc[0], acc_2=acc[1], acc_3=acc[2],
                        scale=scales[0] if len(set(scales)) == 1 else float(np.mean(scales)),
                        degenerate=not (med <= mean <= mx))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Absolute camera-to-world poses as ``N x 4 x 4`` matrices with frame indices."""

    indices: np.ndarray
    matrices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        mats = np.asarray(self.matrices, dtype=np.float64)
        if mats.ndim != 3 or mats.shape[1:] != (4, 4) or len(idx) != len(mats):
            raise InvalidArgument("trajectory needs one 4x4 matrix per index")
        if len(idx) > 1 and not np.all(np.diff(idx) > 0):
            raise InvalidArgument("trajectory indices must be strictly increasing")
        if not np.all(np.isfinite(mats)):
            raise InvalidArgument("trajectory poses must be finite")
        R = mats[:, :3, :3]
        if not np.allclose(R @ np.swapaxes(R, 1, 2), np.eye(3), atol=1e-6) or not np.allclose(np.linalg.det(R), 1.0, atol=1e-6):
            raise InvalidArgument("trajectory rotations must be orthonormal with det +1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def from_poses(cls, poses, indices=None):
        mats = np.stack([p.matrix().detach().numpy() for p in poses])
        return cls(np.arange(len(mats)) if indices is None else np.asarray(indices), mats)

    def poses(self):
        return [Pose.from_matrix(m) for m in self.matrices]

    def positions(self):
        return self.matrices[:, :3, 3]

    def __len__(self):
        return len(self.matrices)

    def __getitem__(self, sl):
        return Trajectory(self.indices[sl], self.matrices[sl])


@dataclass(frozen=True, eq=False)
class Similarity:
    """``y = scale * R @ x + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_positions(self, pts):
        return self.scale * pts @ self.rotation.T + self.translation

    def apply_poses(self, mats):
        out = mats.copy()
        out[:, :3, :3] = self.rotation @ mats[:, :3, :3]
        out[:, :3, 3] = self.apply_positions(mats[:, :3, 3])
        return out


def umeyama(src, dst, with_scale=True) -> Similarity:
    """Least-squares similarity mapping point set ``src`` onto ``dst`` (N x 3)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise AlignmentError("point sets must both be N x 3")
    n = len(src)
    if n < 3:
        raise AlignmentError(f"need at least 3 positions, got {n}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if sv_src[0] == 0 or sv_src[1] <= 1e-10 * sv_src[0]:
        raise AlignmentError("degenerate (collinear or coincident) positions")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs**2).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return Similarity(s, R, t)


def umeyama_align(pred: Trajectory, ref: Trajectory, with_scale=True) -> Similarity:
    """Similarity that maps predicted positions onto reference positions."""
    if len(pred) != len(ref) or not np.array_equal(pred.indices, ref.indices):
        raise AlignmentError("trajectories must share frame indices")
    return umeyama(pred.positions(), ref.positions(), with_scale=with_scale)


@dataclass(frozen=True)
class ApeMetrics:
    rot_mean: float
    rot_max: float
    rot_median: float
    trans_mean: float
    trans_max: float
    trans_median: float
    frames: int

    def to_dict(self):
        return asdict(self)


def pose_errors(pred_mats, ref_mats):
    """Per-frame ``|rot(E) - I|_F`` and ``|trans(E)|`` with ``E = P^-1 P_hat``."""
    R, t = ref_mats[:, :3, :3], ref_mats[:, :3, 3]
    Rp, tp = pred_mats[:, :3, :3], pred_mats[:, :3, 3]
    Rt = np.swapaxes(R, 1, 2)
    rot_E = Rt @ Rp
    trans_E = np.einsum("nij,nj->ni", Rt, tp - t)
    rot_err = np.linalg.norm(rot_E - np.eye(3), axis=(1, 2))
    trans_err = np.linalg.norm(trans_E, axis=1)
    return rot_err, trans_err


def segments(n, segment_len):
    """Consecutive ``[start, stop)`` ranges; a tail shorter than 3 frames is dropped."""
    out = []
    for start in range(0, n, segment_len):
        stop = min(start + segment_len, n)
        if stop - start >= 3:
            out.append((start, stop))
    return out


def ape(pred: Trajectory, ref: Trajectory, segment_len=DEFAULT_SEGMENT_LEN, align=True, with_scale=True) -> ApeMetrics:
    """Absolute pose error pooled over independently aligned segments.

    ``align=False`` skips the Umeyama step (errors in the raw frames).
    """
    if len(pred) != len(ref):
        raise InvalidArgument(f"trajectory lengths differ: {len(pred)} vs {len(ref)}")
    if segment_len < 1:
        raise InvalidArgument("segment length must be positive")
    if align:
        spans = segments(len(pred), segment_len)
    else:
        spans = [(0, len(pred))]
    if not spans or spans[0][1] - spans[0][0] < (3 if align else 1):
        raise InvalidArgument("not enough frames to evaluate")
    rot, trans = [], []
    for a, b in spans:
        p, r = pred[a:b], ref[a:b]
        mats = p.matrices
        if align:
            mats = umeyama_align(p, r, with_scale=with_scale).apply_poses(mats)
        re, te = pose_errors(mats, r.matrices)
        rot.append(re)
        trans.append(te)
    rot = np.concatenate(rot)
    trans = np.concatenate(trans)
    return ApeMetrics(rot_mean=float(rot.mean()), rot_max=float(rot.max()), rot_median=float(np.median(rot)),
                      trans_mean=float(trans.mean()), trans_max=float(trans.max()),
                      trans_median=float(np.median(trans)), frames=int(len(rot)))
