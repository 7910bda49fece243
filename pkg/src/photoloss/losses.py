"""Photometric, supervised and generalized depth/pose losses.

Three training objectives are provided, all as differentiable functions of an
inverse-depth map and a list of relative poses:

``self_supervised_total``
    masked min-over-sources photometric error plus edge-aware smoothness;
``direct_supervised_total``
    photometric term plus direct inverse-depth and pose regression, each with
    its own balancing weight;
``generalized_total``
    photometric error only: depth is judged by warping with the reference
    poses, poses by warping with the reference depth, so no cross-term weights
    are needed.

Per-pixel terms come back as :class:`PixelLossMap`; totals are 0-d tensors.
Masked means divide by the full pixel count, masked-out pixels contribute 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidArgument
from .geometry import Intrinsics, Pose, as_image, as_tensor, warp_inverse_depth


@dataclass(frozen=True)
class SsimParams:
    window: int = 3
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidArgument("SSIM window must be odd and >= 3")
        if not (self.c1 > 0 and self.c2 > 0):
            raise InvalidArgument("SSIM constants must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LossWeights:
    """Term weights; defaults are the published training settings."""

    alpha: float = 0.85
    lambda_: float = 0.001
    psi: float = 15.0
    gamma: float = 30.0
    zeta: float = 15.0
    theta: float = 160.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidArgument("alpha must lie in [0, 1]")
        for name in ("lambda_", "psi", "gamma", "zeta", "theta"):
            if not getattr(self, name) >= 0:
                raise InvalidArgument(f"weight {name.rstrip('_')} must be non-negative")

    def to_dict(self):
        return {"alpha": self.alpha, "lambda": self.lambda_, "psi": self.psi,
                "gamma": self.gamma, "zeta": self.zeta, "theta": self.theta}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class PixelLossMap:
    values: torch.Tensor
    weight_mask: torch.Tensor

    def masked_sum(self):
        return torch.where(self.weight_mask, self.values, torch.zeros_like(self.values)).sum()

    def masked_mean(self):
        """Sum over included pixels divided by the total pixel count."""
        return self.masked_sum() / self.values.numel()


def _check_same(a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _box_filter(x, window):
    """Local mean over a ``window x window`` neighbourhood, edges replicated.

    ``x`` has shape ``(..., H, W)``.
    """
    lead = x.shape[:-2]
    H, W = x.shape[-2:]
    pad = window // 2
    y = x.reshape(-1, 1, H, W)
    y = F.pad(y, (pad, pad, pad, pad), mode="replicate")
    y = F.avg_pool2d(y, window, stride=1)
    return y.reshape(*lead, H, W)


def _ssim(a, b, p: SsimParams):
    """SSIM of ``(..., H, W, C)`` images, averaged over channels -> ``(..., H, W)``."""
    a = a.movedim(-1, -3)
    b = b.movedim(-1, -3)
    stats = _box_filter(torch.stack([a, b, a * a, b * b, a * b]), p.window)
    mu_a, mu_b = stats[0], stats[1]
    var_a = stats[2] - mu_a * mu_a
    var_b = stats[3] - mu_b * mu_b
    cov = stats[4] - mu_a * mu_b
    num = (2 * mu_a * mu_b + p.c1) * (2 * cov + p.c2)
    den = (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2)
    return (num / den).mean(dim=-3)


def _pe(a, b, alpha, p: SsimParams):
    dssim = (1 - _ssim(a, b, p)).clamp(min=0)
    l1 = (a - b).abs().mean(dim=-1)
    return alpha / 2 * dssim + (1 - alpha) * l1


def ssim_map(a, b, p: SsimParams = SsimParams()) -> PixelLossMap:
    """Per-pixel SSIM in ``[-1, 1]``."""
    a, b = as_image(a), as_image(b)
    _check_same(a, b)
    s = _ssim(a, b, p)
    return PixelLossMap(s, torch.ones_like(s, dtype=torch.bool))


def pe(a, b, w: LossWeights = LossWeights(), p: SsimParams = SsimParams()) -> PixelLossMap:
    """Photometric error ``alpha/2 (1 - SSIM) + (1 - alpha) |a - b|``."""
    a, b = as_image(a), as_image(b)
    _check_same(a, b)
    e = _pe(a, b, w.alpha, p)
    return PixelLossMap(e, torch.ones_like(e, dtype=torch.bool))


def _prepare(target, sources, poses):
    target = as_image(target)
    if len(sources) == 0:
        raise InvalidArgument("at least one source image is required")
    if len(sources) != len(poses):
        raise InvalidArgument(f"{len(sources)} sources but {len(poses)} poses")
    srcs = torch.stack([as_image(s) for s in sources])
    for s in srcs:
        _check_same(target, s)
    return target, srcs


def _warp_sources(srcs, inv_depth, poses, K):
    warped, valid = [], []
    for src, pose in zip(srcs, poses):
        img, ok = warp_inverse_depth(src, inv_depth, pose.rotation(), pose.x, K)
        warped.append(img)
        valid.append(ok)
    return torch.stack(warped), torch.stack(valid)


def _min_pe(target, images, valid, w, p):
    """Min over the leading axis of ``pe(target, images[j])``; ``inf`` where no image is valid."""
    err = _pe(target.expand_as(images), images, w.alpha, p)
    if valid is not None:
        err = torch.where(valid, err, torch.full_like(err, float("inf")))
    return err.min(dim=0).values


def _identity_pe(target, srcs, w, p):
    return _min_pe(target, srcs, None, w, p)


def _photometric(target, srcs, inv_depth, poses, K, w, p, unwarped):
    """Min-over-sources warped error, its validity and its automask."""
    warped, valid = _warp_sources(srcs, inv_depth, poses, K)
    err = _min_pe(target, warped, valid, w, p)
    any_valid = valid.any(dim=0)
    mask = err < unwarped
    values = torch.where(any_valid, err, torch.zeros_like(err))
    return values, any_valid, mask


def reprojection_loss(target, sources, depth, poses, K: Intrinsics,
                      w: LossWeights = LossWeights(), p: SsimParams = SsimParams()) -> PixelLossMap:
    """Per-pixel minimum over sources of ``pe(target, warp(source))``.

    Pixels that no source covers are excluded through ``weight_mask``.
    """
    target, srcs = _prepare(target, sources, poses)
    warped, valid = _warp_sources(srcs, 1.0 / as_tensor(depth), poses, K)
    err = _min_pe(target, warped, valid, w, p)
    any_valid = valid.any(dim=0)
    return PixelLossMap(torch.where(any_valid, err, torch.zeros_like(err)), any_valid)


def automask(target, sources, warped, w: LossWeights = LossWeights(), p: SsimParams = SsimParams(),
             warped_valid=None) -> torch.Tensor:
    """True where warping beats leaving the source unwarped (strict ``<``).

    ``warped_valid`` optionally marks warped pixels to ignore in the min.
    """
    target = as_image(target)
    srcs = torch.stack([as_image(s) for s in sources])
    wimgs = torch.stack([as_image(s) for s in warped])
    _check_same(srcs, wimgs)
    _check_same(target, srcs[0])
    valid = None if warped_valid is None else torch.stack([torch.as_tensor(v, dtype=torch.bool) for v in warped_valid])
    return _min_pe(target, wimgs, valid, w, p) < _identity_pe(target, srcs, w, p)


def _image_gradients(img):
    """Forward differences along x and y, zero in the last column/row."""
    gx = torch.zeros_like(img)
    gy = torch.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


def _smoothness(inv_depth, target):
    d = inv_depth / inv_depth.mean()
    dx, dy = _image_gradients(d)
    ix, iy = _image_gradients(target)
    wx = torch.exp(-ix.abs().mean(dim=-1))
    wy = torch.exp(-iy.abs().mean(dim=-1))
    return dx.abs() * wx + dy.abs() * wy


def smoothness_loss(inv_depth, target) -> PixelLossMap:
    """Edge-aware smoothness of mean-normalized inverse depth."""
    inv_depth = as_tensor(inv_depth)
    target = as_image(target)
    _check_same(inv_depth, target[..., 0])
    s = _smoothness(inv_depth, target)
    return PixelLossMap(s, torch.ones_like(s, dtype=torch.bool))


def _masked_sum(values, mask):
    return torch.where(mask, values, torch.zeros_like(values)).sum()


def self_supervised_total(target, sources, inv_depth, poses, K: Intrinsics,
                          w: LossWeights = LossWeights(), p: SsimParams = SsimParams()):
    """``1/N sum(mu L_p + lambda L_s)`` with predicted depth and poses."""
    target, srcs = _prepare(target, sources, poses)
    inv_depth = as_tensor(inv_depth)
    unwarped = _identity_pe(target, srcs, w, p)
    lp, _, mu = _photometric(target, srcs, inv_depth, poses, K, w, p, unwarped)
    ls = _smoothness(inv_depth, target)
    return (_masked_sum(lp, mu) + w.lambda_ * ls.sum()) / lp.numel()


def _joint_normalize(a, b):
    lo = torch.minimum(a.min(), b.min())
    hi = torch.maximum(a.max(), b.max())
    span = hi - lo
    if span.item() <= 0:
        return a - lo, b - lo
    return (a - lo) / span, (b - lo) / span


def depth_supervision_map(pred_inv, ref_inv, p: SsimParams = SsimParams()):
    """Per-pixel ``0.1 L_d + L_g + L_SSIM`` on inverse depth."""
    pred_inv, ref_inv = as_tensor(pred_inv), as_tensor(ref_inv)
    _check_same(pred_inv, ref_inv)
    if pred_inv.ndim != 2:
        raise InvalidArgument("inverse depth maps must be 2-D")
    diff = pred_inv - ref_inv
    gx, gy = _image_gradients(diff)
    na, nb = _joint_normalize(pred_inv, ref_inv)
    l_ssim = (1 - _ssim(na.unsqueeze(-1), nb.unsqueeze(-1), p)) / 2
    return 0.1 * diff.abs() + gx.abs() + gy.abs() + l_ssim


def depth_supervision_loss(pred_inv, ref_inv, p: SsimParams = SsimParams()):
    # both maps are min-max normalized together before SSIM so c1/c2 keep their [0, 1] scale
    return depth_supervision_map(pred_inv, ref_inv, p).mean()


def pose_supervision_loss(pred: Pose, ref: Pose, w: LossWeights = LossWeights()):
    return w.zeta * torch.linalg.norm(pred.x - ref.x) + w.theta * torch.linalg.norm(pred.r - ref.r)


def direct_supervised_total(target, sources, inv_depth, poses, ref_inv_depth, ref_poses, K: Intrinsics,
                            w: LossWeights = LossWeights(), p: SsimParams = SsimParams()):
    """``1/N sum(psi mu L_p + gamma L_dt) + sum_j L_pose``."""
    target, srcs = _prepare(target, sources, poses)
    if len(ref_poses) != len(poses):
        raise InvalidArgument("one reference pose per source is required")
    inv_depth = as_tensor(inv_depth)
    unwarped = _identity_pe(target, srcs, w, p)
    lp, _, mu = _photometric(target, srcs, inv_depth, poses, K, w, p, unwarped)
    l_depth = depth_supervision_map(inv_depth, ref_inv_depth, p)
    total = (w.psi * _masked_sum(lp, mu) + w.gamma * l_depth.sum()) / lp.numel()
    for pred, ref in zip(poses, ref_poses):
        total = total + pose_supervision_loss(pred, ref, w)
    return total


def gen_depth_loss(target, sources, pred_depth, ref_poses, K: Intrinsics,
                   w: LossWeights = LossWeights(), p: SsimParams = SsimParams()) -> PixelLossMap:
    """Photometric error of predicted depth warped with reference poses.

    ``weight_mask`` is the automask of this term.
    """
    target, srcs = _prepare(target, sources, ref_poses)
    unwarped = _identity_pe(target, srcs, w, p)
    values, _, mask = _photometric(target, srcs, 1.0 / as_tensor(pred_depth), ref_poses, K, w, p, unwarped)
    return PixelLossMap(values, mask)


def gen_pose_loss(target, sources, ref_depth, pred_poses, K: Intrinsics,
                  w: LossWeights = LossWeights(), p: SsimParams = SsimParams()) -> PixelLossMap:
    """Photometric error of predicted poses warped with the reference depth."""
    target, srcs = _prepare(target, sources, pred_poses)
    unwarped = _identity_pe(target, srcs, w, p)
    values, _, mask = _photometric(target, srcs, 1.0 / as_tensor(ref_depth), pred_poses, K, w, p, unwarped)
    return PixelLossMap(values, mask)


def generalized_total(target, sources, inv_depth, poses, ref_inv_depth, ref_poses, K: Intrinsics,
                      w: LossWeights = LossWeights(), p: SsimParams = SsimParams()):
    """``1/N sum(mu_dp L_dp + mu_rp L_rp + mu L_p + lambda L_s)``, no cross-term weights."""
    target, srcs = _prepare(target, sources, poses)
    if len(ref_poses) != len(poses):
        raise InvalidArgument("one reference pose per source is required")
    inv_depth = as_tensor(inv_depth)
    ref_inv_depth = as_tensor(ref_inv_depth)
    unwarped = _identity_pe(target, srcs, w, p)
    l_dp, _, mu_dp = _photometric(target, srcs, inv_depth, ref_poses, K, w, p, unwarped)
    l_rp, _, mu_rp = _photometric(target, srcs, ref_inv_depth, poses, K, w, p, unwarped)
    lp, _, mu = _photometric(target, srcs, inv_depth, poses, K, w, p, unwarped)
    ls = _smoothness(inv_depth, target)
    total = _masked_sum(l_dp, mu_dp) + _masked_sum(l_rp, mu_rp) + _masked_sum(lp, mu) + w.lambda_ * ls.sum()
    return total / lp.numel()
