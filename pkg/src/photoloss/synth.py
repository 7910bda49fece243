"""Procedural test scenes with exact depth and pose ground truth.

Surfaces carry a solid (3-D) value-noise albedo with no shading, so every
frame sees the same intensity at a given surface point and the photometric
losses vanish exactly at the true geometry, up to interpolation error.
Trajectory poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationError, InvalidArgument
from .geometry import Intrinsics, Pose, compose, inverse

SURFACE_KINDS = ("plane", "slanted-plane", "sphere-patch")


@dataclass(frozen=True)
class Surface:
    """``plane``/``slanted-plane``: points with ``normal . X = distance``;
    ``sphere-patch``: sphere of ``radius`` around ``center`` seen from outside."""

    kind: str = "plane"
    distance: float = 2.0
    normal: tuple = (0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0, 6.0)
    radius: float = 4.0

    def __post_init__(self):
        if self.kind not in SURFACE_KINDS:
            raise InvalidArgument(f"unknown surface kind {self.kind!r}; expected one of {SURFACE_KINDS}")
        n = np.asarray(self.normal, dtype=np.float64)
        if self.kind == "plane":
            object.__setattr__(self, "normal", (0.0, 0.0, 1.0))
        elif n.shape != (3,) or not np.linalg.norm(n) > 0:
            raise InvalidArgument("plane normal must be a non-zero 3-vector")
        else:
            object.__setattr__(self, "normal", tuple(float(v) for v in n / np.linalg.norm(n)))
        if self.kind == "sphere-patch" and not self.radius > 0:
            raise InvalidArgument("sphere radius must be positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    def intersect(self, origin, dirs):
        """Ray parameter ``t`` of the first hit for rays ``origin + t * dirs``; NaN on a miss."""
        if self.kind == "sphere-patch":
            oc = origin - np.asarray(self.center)
            a = np.einsum("...i,...i->...", dirs, dirs)
            b = 2 * np.einsum("...i,...i->...", dirs, oc)
            c = oc @ oc - self.radius**2
            disc = b * b - 4 * a * c
            root = np.sqrt(np.where(disc >= 0, disc, np.nan))
            t0 = (-b - root) / (2 * a)
            t1 = (-b + root) / (2 * a)
            return np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.nan))
        n = np.asarray(self.normal)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.distance - n @ origin) / denom
        return np.where(np.isfinite(t) & (t > 0), t, np.nan)

    def signed_distance(self, pts):
        if self.kind == "sphere-patch":
            return np.linalg.norm(pts - np.asarray(self.center), axis=-1) - self.radius
        return self.distance - pts @ np.asarray(self.normal)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "sphere-patch":
            d.update(center=list(self.center), radius=self.radius)
        else:
            d.update(distance=self.distance, normal=list(self.normal))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("normal", "center"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass(frozen=True)
class TextureSpec:
    """Multi-octave value noise; ``base_frequency`` in lattice cells per scene unit."""

    seed: int = 0
    octaves: int = 2
    base_frequency: float = 2.0
    persistence: float = 0.5
    lattice: int = 64

    def __post_init__(self):
        if self.octaves < 1 or self.base_frequency <= 0 or self.lattice < 2:
            raise InvalidArgument("texture needs octaves >= 1, base_frequency > 0, lattice >= 2")

    def to_dict(self):
        return {"seed": self.seed, "octaves": self.octaves, "base_frequency": self.base_frequency,
                "persistence": self.persistence, "lattice": self.lattice}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ValueNoise:
    """Solid noise in ``[0, 1]``: quintic-faded trilinear lattice noise summed over octaves."""

    def __init__(self, spec: TextureSpec, channel=0):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, channel])
        L = spec.lattice
        self.tables = rng.random((spec.octaves, L, L, L))
        # decorrelate octaves that would otherwise share lattice alignment at the origin
        self.offsets = rng.random((spec.octaves, 3)) * L

    @staticmethod
    def _fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        L = self.spec.lattice
        total = np.zeros(pts.shape[:-1])
        norm = 0.0
        amp, freq = 1.0, self.spec.base_frequency
        for k in range(self.spec.octaves):
            p = pts * freq + self.offsets[k]
            i0 = np.floor(p)
            f = self._fade(p - i0)
            i0 = i0.astype(np.int64) % L
            i1 = (i0 + 1) % L
            tab = self.tables[k]
            val = 0.0
            for cx, wx in ((i0[..., 0], 1 - f[..., 0]), (i1[..., 0], f[..., 0])):
                for cy, wy in ((i0[..., 1], 1 - f[..., 1]), (i1[..., 1], f[..., 1])):
                    for cz, wz in ((i0[..., 2], 1 - f[..., 2]), (i1[..., 2], f[..., 2])):
                        val = val + wx * wy * wz * tab[cx, cy, cz]
            total += amp * val
            norm += amp
            amp *= self.spec.persistence
            freq *= 2.0
        return total / norm


@dataclass(frozen=True, eq=False)
class SceneSpec:
    surface: Surface = field(default_factory=Surface)
    texture: TextureSpec = field(default_factory=TextureSpec)
    trajectory: tuple = ()
    intrinsics: Intrinsics = field(default_factory=Intrinsics.default)
    channels: int = 1

    def __post_init__(self):
        if len(self.trajectory) < 3:
            raise InvalidArgument("trajectory needs at least 3 poses")
        if self.channels not in (1, 3):
            raise InvalidArgument("channels must be 1 or 3")
        object.__setattr__(self, "trajectory", tuple(self.trajectory))

    def to_dict(self):
        return {"surface": self.surface.to_dict(), "texture": self.texture.to_dict(),
                "trajectory": [p.to_dict() for p in self.trajectory],
                "intrinsics": self.intrinsics.to_dict(), "channels": self.channels}

    @classmethod
    def from_dict(cls, d):
        return cls(surface=Surface.from_dict(d.get("surface", {})),
                   texture=TextureSpec.from_dict(d.get("texture", {})),
                   trajectory=tuple(Pose.from_dict(p) for p in d["trajectory"]),
                   intrinsics=Intrinsics.from_dict(d["intrinsics"]) if "intrinsics" in d else Intrinsics.default(),
                   channels=int(d.get("channels", 1)))


@dataclass(frozen=True, eq=False)
class FrameTriplet:
    """Target frame ``t`` with sources ``t-1`` and ``t+1``.

    ``rel_poses[j]`` maps target-camera points into the camera of ``sources[j]``.
    """

    target: np.ndarray
    sources: tuple
    target_depth: np.ndarray
    rel_poses: tuple
    intrinsics: Intrinsics
    index: int = 1

    @property
    def inv_depth(self):
        return 1.0 / self.target_depth


def translating_trajectory(n=3, step=(0.1, 0.0, 0.0), rotation_step=(0.0, 0.0, 0.0)):
    """``n`` camera-to-world poses centred on the identity, moving by ``step`` per frame."""
    step = np.asarray(step, dtype=np.float64)
    rot = np.asarray(rotation_step, dtype=np.float64)
    mid = (n - 1) / 2
    return tuple(Pose((k - mid) * rot, (k - mid) * step) for k in range(n))


def default_scene(channels=1, seed=0):
    """64x64 fronto-parallel plane at distance 2 seen by a camera translating along x."""
    return SceneSpec(surface=Surface("plane", distance=2.0), texture=TextureSpec(seed=seed),
                     trajectory=translating_trajectory(), intrinsics=Intrinsics.default(64), channels=channels)


def camera_rays(K: Intrinsics):
    v, u = np.meshgrid(np.arange(K.height, dtype=np.float64), np.arange(K.width, dtype=np.float64), indexing="ij")
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def render_frame(spec: SceneSpec, pose: Pose, noises=None, index=0):
    """Image and z-depth seen from camera-to-world ``pose``."""
    if noises is None:
        noises = [ValueNoise(spec.texture, c) for c in range(spec.channels)]
    R = pose.rotation().detach().numpy()
    origin = pose.x.detach().numpy()
    rays = camera_rays(spec.intrinsics)
    # ray z-component is 1 in camera coordinates, so the hit parameter is the z-depth
    t = spec.surface.intersect(origin, rays @ R.T)
    if not np.all(np.isfinite(t)):
        raise GenerationError(f"surface not visible from every pixel of trajectory pose {index}", pose_index=index)
    pts = origin + t[..., None] * (rays @ R.T)
    img = np.stack([noise(pts) for noise in noises], axis=-1)
    return img, t


def render_frames(spec: SceneSpec):
    """Images and depths for every trajectory pose."""
    noises = [ValueNoise(spec.texture, c) for c in range(spec.channels)]
    images, depths = [], []
    for i, pose in enumerate(spec.trajectory):
        img, depth = render_frame(spec, pose, noises, index=i)
        images.append(img)
        depths.append(depth)
    return images, depths


def relative_pose(target_pose: Pose, source_pose: Pose) -> Pose:
    """``T_{t->s} = P_s^{-1} P_t`` for camera-to-world poses."""
    return compose(inverse(source_pose), target_pose)


def render_scene(spec: SceneSpec):
    """One :class:`FrameTriplet` per interior trajectory index."""
    images, depths = render_frames(spec)
    traj = spec.trajectory
    out = []
    for t in range(1, len(traj) - 1):
        out.append(FrameTriplet(
            target=images[t],
            sources=(images[t - 1], images[t + 1]),
            target_depth=depths[t],
            rel_poses=(relative_pose(traj[t], traj[t - 1]), relative_pose(traj[t], traj[t + 1])),
            intrinsics=spec.intrinsics,
            index=t,
        ))
    return out


def perturb(triplet: FrameTriplet, depth_noise=0.0, rotation_noise=0.0, translation_noise=0.0, seed=0):
    """Noisy copy of the depth and relative poses of ``triplet``.

    Depth gets multiplicative log-normal noise with log-std ``depth_noise``.
    Rotation noise is Gaussian with RMS norm ``rotation_noise`` radians;
    translation noise has RMS norm ``translation_noise * |x|``.
    """
    rng = np.random.default_rng(seed)
    depth = triplet.target_depth
    if depth_noise > 0:
        depth = depth * np.exp(depth_noise * rng.standard_normal(depth.shape))
    poses = []
    for pose in triplet.rel_poses:
        r, x = pose.numpy()
        if rotation_noise > 0:
            r = r + rotation_noise / np.sqrt(3) * rng.standard_normal(3)
        if translation_noise > 0:
            x = x + translation_noise * np.linalg.norm(x) / np.sqrt(3) * rng.standard_normal(3)
        poses.append(Pose(r, x))
    return replace(triplet, target_depth=depth.copy(), rel_poses=tuple(poses))
