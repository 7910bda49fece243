"""Pinhole camera model, rigid transforms and differentiable view synthesis.

Conventions used throughout the package:

* pixel centers sit on integer coordinates, origin at the top-left,
  ``u`` is the column and ``v`` the row;
* images are ``H x W x C`` float64 tensors, depth maps ``H x W``;
* a relative pose ``T_{t->s}`` maps points from target-camera coordinates
  into source-camera coordinates, ``X_s = R X_t + x``.

Every function accepts numpy arrays or tensors and returns float64 tensors, so
gradients flow when the caller passes tensors with ``requires_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import InvalidArgument

DTYPE = torch.float64

# Below this angle Rodrigues' formula is replaced by its Taylor expansion.
SMALL_ANGLE = 1e-8


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def as_image(img) -> torch.Tensor:
    """Return ``img`` as an ``H x W x C`` tensor; 2-D input gains a channel axis."""
    img = as_tensor(img)
    if img.ndim == 2:
        img = img.unsqueeze(-1)
    if img.ndim != 3 or img.shape[-1] not in (1, 3):
        raise InvalidArgument(f"image must be HxW or HxWxC with C in (1, 3), got shape {tuple(img.shape)}")
    return img


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidArgument("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise InvalidArgument("image must be at least 2x2")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @classmethod
    def default(cls, size=64):
        """Square camera with a 90-ish degree field of view and centered principal point."""
        return cls(fx=float(size), fy=float(size), cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size)

    @property
    def shape(self):
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]))

    def check(self, hw, what="input"):
        if tuple(hw) != self.shape:
            raise InvalidArgument(f"{what} has size {tuple(hw)}, intrinsics expect {self.shape}")


def skew(v: torch.Tensor) -> torch.Tensor:
    z = torch.zeros((), dtype=v.dtype)
    return torch.stack([
        torch.stack([z, -v[2], v[1]]),
        torch.stack([v[2], z, -v[0]]),
        torch.stack([-v[1], v[0], z]),
    ])


def axis_angle_to_matrix(r) -> torch.Tensor:
    """Rodrigues' rotation formula, differentiable in ``r``."""
    r = as_tensor(r)
    if r.shape != (3,):
        raise InvalidArgument(f"axis-angle vector must have 3 components, got shape {tuple(r.shape)}")
    if not torch.isfinite(r).all():
        raise InvalidArgument("axis-angle vector must be finite")
    K = skew(r)
    eye = torch.eye(3, dtype=DTYPE)
    theta2 = torch.dot(r, r)
    if theta2.item() < SMALL_ANGLE**2:
        # second-order expansion; exact identity at r = 0
        return eye + K + 0.5 * (K @ K)
    theta = torch.sqrt(theta2)
    return eye + (torch.sin(theta) / theta) * K + ((1 - torch.cos(theta)) / theta2) * (K @ K)


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R.detach() if isinstance(R, torch.Tensor) else R, dtype=np.float64)
    return Rotation.from_matrix(R).as_rotvec()


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as axis-angle rotation ``r`` and translation ``x``."""

    r: torch.Tensor
    x: torch.Tensor

    def __post_init__(self):
        r, x = as_tensor(self.r), as_tensor(self.x)
        if r.shape != (3,) or x.shape != (3,):
            raise InvalidArgument("pose needs 3-vectors r and x")
        if not (torch.isfinite(r).all() and torch.isfinite(x).all()):
            raise InvalidArgument("pose components must be finite")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "x", x)

    @classmethod
    def identity(cls):
        return cls(torch.zeros(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T.detach() if isinstance(T, torch.Tensor) else T, dtype=np.float64)
        if T.shape != (4, 4):
            raise InvalidArgument("pose matrix must be 4x4")
        return cls(matrix_to_axis_angle(T[:3, :3]), T[:3, 3].copy())

    def rotation(self) -> torch.Tensor:
        return axis_angle_to_matrix(self.r)

    def matrix(self) -> torch.Tensor:
        top = torch.cat([self.rotation(), self.x.reshape(3, 1)], dim=1)
        return torch.cat([top, torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=DTYPE)], dim=0)

    def inverse(self) -> "Pose":
        return inverse(self)

    def detach(self) -> "Pose":
        return Pose(self.r.detach().clone(), self.x.detach().clone())

    def numpy(self):
        return self.r.detach().numpy().copy(), self.x.detach().numpy().copy()

    def to_dict(self):
        r, x = self.numpy()
        return {"r": r.tolist(), "x": x.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["r"], d["x"])

    def __repr__(self):
        r, x = self.numpy()
        return f"Pose(r={np.array2string(r, precision=6)}, x={np.array2string(x, precision=6)})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    return Pose.from_matrix(a.matrix().detach().numpy() @ b.matrix().detach().numpy())


def inverse(a: Pose) -> Pose:
    R = a.rotation().detach().numpy()
    x = a.x.detach().numpy()
    return Pose(-a.r.detach().clone(), -R.T @ x)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Continuous source-pixel coordinates for every target pixel.

    ``coords[..., 0]`` is the column ``u``, ``coords[..., 1]`` the row ``v``.
    ``valid`` is false where the point lands behind the source camera or
    outside ``[0, W-1] x [0, H-1]``.
    """

    coords: torch.Tensor
    valid: torch.Tensor


def pixel_grid(height, width):
    v, u = torch.meshgrid(torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij")
    return u, v


def backproject(depth, K: Intrinsics) -> torch.Tensor:
    """3-D camera-frame points ``H x W x 3`` for every pixel."""
    depth = as_tensor(depth)
    K.check(depth.shape, "depth")
    u, v = pixel_grid(K.height, K.width)
    return torch.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], dim=-1)


def project_points(points, K: Intrinsics) -> torch.Tensor:
    points = as_tensor(points)
    z = points[..., 2]
    return torch.stack([K.fx * points[..., 0] / z + K.cx, K.fy * points[..., 1] / z + K.cy], dim=-1)


def project_inverse_depth(inv_depth, R, t, K: Intrinsics) -> FlowField:
    """Projection with the depth map given as its reciprocal.

    The transformed ray is scaled by inverse depth, ``q = R ray + d t``, which
    is the camera-frame point divided by its depth. Source coordinates are
    formed as an offset from the target pixel so that the identity transform
    reproduces the integer grid exactly.
    """
    inv_depth = as_tensor(inv_depth)
    K.check(inv_depth.shape, "depth")
    u, v = pixel_grid(K.height, K.width)
    ray_x = (u - K.cx) / K.fx
    ray_y = (v - K.cy) / K.fy
    rays = torch.stack([ray_x, ray_y, torch.ones_like(u)], dim=-1)
    q = rays @ as_tensor(R).T + inv_depth.unsqueeze(-1) * as_tensor(t)
    qz = q[..., 2]
    in_front = qz > 1e-9
    qz_safe = torch.where(in_front, qz, torch.ones_like(qz))
    su = u + K.fx * (q[..., 0] / qz_safe - ray_x)
    sv = v + K.fy * (q[..., 1] / qz_safe - ray_y)
    coords = torch.stack([su, sv], dim=-1)
    inside = (su >= 0) & (su <= K.width - 1) & (sv >= 0) & (sv <= K.height - 1)
    return FlowField(coords=coords, valid=in_front & inside & torch.isfinite(coords).all(dim=-1))


def project(depth, pose: Pose, K: Intrinsics) -> FlowField:
    """Where each target pixel lands in the source image under ``pose``."""
    depth = as_tensor(depth)
    K.check(depth.shape, "depth")
    return project_inverse_depth(1.0 / depth, pose.rotation(), pose.x, K)


def bilinear_sample(src, flow: FlowField):
    """Bilinear lookup of ``src`` at ``flow.coords`` with clamp-to-edge borders.

    Returns the sampled image and ``flow.valid``.
    """
    src = as_image(src)
    H, W, _ = src.shape
    if tuple(flow.coords.shape[:2]) != (H, W):
        raise InvalidArgument(f"flow size {tuple(flow.coords.shape[:2])} does not match image size {(H, W)}")
    coords = torch.nan_to_num(flow.coords, nan=0.0)
    u = coords[..., 0].clamp(0, W - 1)
    v = coords[..., 1].clamp(0, H - 1)
    u0 = torch.floor(u).clamp(max=W - 2)
    v0 = torch.floor(v).clamp(max=H - 2)
    fu = (u - u0).unsqueeze(-1)
    fv = (v - v0).unsqueeze(-1)
    iu, iv = u0.long(), v0.long()
    a = src[iv, iu]
    b = src[iv, iu + 1]
    c = src[iv + 1, iu]
    d = src[iv + 1, iu + 1]
    out = (1 - fu) * (1 - fv) * a + fu * (1 - fv) * b + (1 - fu) * fv * c + fu * fv * d
    return out, flow.valid


def warp_inverse_depth(src, inv_depth, R, t, K: Intrinsics):
    src = as_image(src)
    K.check(src.shape[:2], "source image")
    return bilinear_sample(src, project_inverse_depth(inv_depth, R, t, K))


def warp(src, depth, pose: Pose, K: Intrinsics):
    """Synthesize the target view from ``src`` given target depth and ``T_{t->s}``."""
    src = as_image(src)
    K.check(src.shape[:2], "source image")
    return bilinear_sample(src, project(depth, pose, K))
