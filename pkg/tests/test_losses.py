import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from photoloss.errors import InvalidArgument
from photoloss.geometry import Intrinsics, Pose, warp
from photoloss.losses import (LossWeights, SsimParams, automask, depth_supervision_loss, direct_supervised_total,
                              gen_depth_loss, gen_pose_loss, generalized_total, pe, pose_supervision_loss,
                              reprojection_loss, self_supervised_total, smoothness_loss, ssim_map)
from photoloss.synth import default_scene, perturb, render_scene

C1, C2 = 0.01**2, 0.03**2


def ssim_oracle(a, b):
    """Per-pixel SSIM with a 3x3 window and replicated borders, written as plain loops."""
    H, W = a.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            pa, pb = [], []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    y = min(max(i + di, 0), H - 1)
                    x = min(max(j + dj, 0), W - 1)
                    pa.append(a[y, x])
                    pb.append(b[y, x])
            pa, pb = np.array(pa), np.array(pb)
            ma, mb = pa.mean(), pb.mean()
            va = (pa * pa).mean() - ma * ma
            vb = (pb * pb).mean() - mb * mb
            cov = (pa * pb).mean() - ma * mb
            out[i, j] = (2 * ma * mb + C1) * (2 * cov + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2))
    return out


def pe_oracle(a, b, alpha=0.85):
    return alpha / 2 * np.maximum(1 - ssim_oracle(a, b), 0) + (1 - alpha) * np.abs(a - b)


@pytest.fixture(scope="module")
def scene():
    return render_scene(default_scene())[0]


def _args(tr, inv=None, poses=None):
    inv = tr.inv_depth if inv is None else inv
    poses = tr.rel_poses if poses is None else poses
    return (tr.target, tr.sources, inv, poses, tr.inv_depth, tr.rel_poses, tr.intrinsics)


# --- SSIM and pe -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    np.testing.assert_allclose(ssim_map(a, b).values.numpy(), ssim_oracle(a, b), rtol=0, atol=1e-10)


def test_ssim_colour_is_channel_mean():
    rng = np.random.default_rng(9)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    expected = np.mean([ssim_oracle(a[..., c], b[..., c]) for c in range(3)], axis=0)
    np.testing.assert_allclose(ssim_map(a, b).values.numpy(), expected, atol=1e-10)


def test_pe_matches_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    np.testing.assert_allclose(pe(a, b).values.numpy(), pe_oracle(a, b), atol=1e-10)


def test_pe_of_identical_images_is_zero():
    a = np.random.default_rng(4).random((8, 8, 3))
    assert pe(a, a).values.abs().max().item() < 1e-12


def test_pe_constant_offset():
    # SSIM of a and a + 0.1 on constant images: (2*0.5*0.6 + c1) / (0.25 + 0.36 + c1)
    a = np.full((8, 8), 0.5)
    s = (2 * 0.5 * 0.6 + C1) / (0.25 + 0.36 + C1)
    np.testing.assert_allclose(pe(a, a + 0.1).values.numpy(), 0.425 * (1 - s) + 0.15 * 0.1, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), arrays(np.float64, (6, 6), elements=st.floats(0, 1)))
def test_pe_nonnegative_and_symmetric(a, b):
    ab, ba = pe(a, b).values, pe(b, a).values
    assert (ab >= 0).all()
    assert torch.allclose(ab, ba, rtol=0, atol=1e-12)


def test_pe_shape_mismatch():
    with pytest.raises(InvalidArgument):
        pe(np.zeros((4, 4)), np.zeros((4, 5)))


def test_weights_defaults_and_json_key():
    w = LossWeights()
    assert (w.alpha, w.lambda_, w.psi, w.gamma, w.zeta, w.theta) == (0.85, 0.001, 15, 30, 15, 160)
    assert LossWeights.from_dict(w.to_dict()) == w
    assert "lambda" in w.to_dict()
    with pytest.raises(InvalidArgument):
        LossWeights(alpha=1.5)


# --- reprojection and masking ---------------------------------------------

def test_reprojection_identity_single_source_is_zero():
    K = Intrinsics.default(16)
    img = np.random.default_rng(5).random((16, 16))
    m = reprojection_loss(img, [img], np.ones((16, 16)), [Pose.identity()], K)
    assert m.values.abs().max().item() == 0


def test_reprojection_min_picks_perfect_source(scene):
    other = scene.sources[0]
    m = reprojection_loss(scene.target, [other, scene.target], scene.target_depth,
                          [Pose([0, 0, 0], [0.3, 0, 0]), Pose.identity()], scene.intrinsics)
    assert m.values.abs().max().item() == 0


def test_reprojection_more_sources_is_pointwise_smaller(scene):
    both = reprojection_loss(scene.target, scene.sources, scene.target_depth * 1.1, scene.rel_poses, scene.intrinsics)
    for j in range(2):
        one = reprojection_loss(scene.target, [scene.sources[j]], scene.target_depth * 1.1, [scene.rel_poses[j]],
                                scene.intrinsics)
        covered = one.weight_mask
        assert (both.values[covered] <= one.values[covered]).all()


def test_reprojection_true_depth_beats_perturbed(scene):
    def mean(depth):
        return reprojection_loss(scene.target, scene.sources, depth, scene.rel_poses, scene.intrinsics).masked_mean()

    assert mean(scene.target_depth) < mean(1.1 * scene.target_depth)


def test_automask_is_strict(scene):
    # warped == unwarped gives equal errors, so the strict comparison masks everything out
    mask = automask(scene.target, scene.sources, scene.sources)
    assert not bool(mask.any())


def test_automask_keeps_pixels_fixed_by_warping(scene):
    warped = [warp(s, scene.target_depth, p, scene.intrinsics)[0] for s, p in zip(scene.sources, scene.rel_poses)]
    mask = automask(scene.target, scene.sources, warped)
    assert mask.float().mean().item() > 0.5


def test_automask_static_scene_excludes_all():
    img = np.random.default_rng(6).random((16, 16))
    assert not bool(automask(img, [img, img], [img, img]).any())


# --- smoothness ------------------------------------------------------------

def smoothness_oracle(inv, img):
    d = inv / inv.mean()
    H, W = d.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            if j + 1 < W:
                out[i, j] += abs(d[i, j + 1] - d[i, j]) * np.exp(-abs(img[i, j + 1] - img[i, j]))
            if i + 1 < H:
                out[i, j] += abs(d[i + 1, j] - d[i, j]) * np.exp(-abs(img[i + 1, j] - img[i, j]))
    return out


def test_smoothness_matches_loop_oracle():
    rng = np.random.default_rng(7)
    inv, img = rng.uniform(0.2, 1, (7, 9)), rng.random((7, 9))
    np.testing.assert_allclose(smoothness_loss(inv, img).values.numpy(), smoothness_oracle(inv, img), atol=1e-12)


@pytest.mark.parametrize("k", [0.1, 3.0, 40.0])
def test_smoothness_scale_invariant(k):
    rng = np.random.default_rng(8)
    inv, img = rng.uniform(0.2, 1, (8, 8)), rng.random((8, 8))
    a = smoothness_loss(inv, img).values
    b = smoothness_loss(k * inv, img).values
    assert torch.allclose(a, b, rtol=0, atol=1e-12)


def test_smoothness_of_constant_depth_is_zero():
    img = np.random.default_rng(0).random((8, 8))
    assert smoothness_loss(np.full((8, 8), 0.4), img).values.abs().max().item() == 0


# --- supervised terms ------------------------------------------------------

def test_depth_supervision_zero_at_reference():
    inv = np.random.default_rng(1).uniform(0.2, 1, (8, 8))
    assert abs(depth_supervision_loss(inv, inv).item()) < 1e-15


def test_depth_supervision_grows_with_error():
    inv = np.random.default_rng(1).uniform(0.2, 1, (8, 8))
    assert depth_supervision_loss(1.05 * inv, inv) < depth_supervision_loss(1.2 * inv, inv)


def test_pose_supervision_values():
    a = Pose([0, 0, 0.01], [0.1, 0, 0])
    b = Pose([0, 0, 0], [0.1, 0.02, 0])
    assert pose_supervision_loss(a, a).item() == 0
    assert pose_supervision_loss(a, b).item() == pytest.approx(15 * 0.02 + 160 * 0.01, rel=1e-12)
    assert pose_supervision_loss(a, b).item() == pose_supervision_loss(b, a).item()


# --- totals ----------------------------------------------------------------

def test_direct_total_zero_at_references(scene):
    # static triplet: the photometric term vanishes too, so the whole total is exactly 0
    static = (scene.target, [scene.target, scene.target], scene.inv_depth, [Pose.identity()] * 2,
              scene.inv_depth, [Pose.identity()] * 2, scene.intrinsics)
    assert direct_supervised_total(*static).item() == 0
    # on a moving triplet only the photometric residual (interpolation error) remains
    assert direct_supervised_total(*_args(scene), w=LossWeights(psi=0.0)).item() == 0


def test_generalized_total_small_at_truth(scene):
    assert generalized_total(*_args(scene)).item() <= 1e-3


def test_totals_ordering_truth_vs_perturbed(scene):
    pt = perturb(scene, 0.1, 0.02, 0.02, seed=0)
    for fn in (generalized_total, self_supervised_total):
        args = _args(scene) if fn is generalized_total else _args(scene)[:4] + (scene.intrinsics,)
        bad = _args(scene, pt.inv_depth, pt.rel_poses)
        bad = bad if fn is generalized_total else bad[:4] + (scene.intrinsics,)
        assert fn(*args) < fn(*bad)


def test_generalized_local_minimum(scene):
    rng = np.random.default_rng(11)
    at_truth = generalized_total(*_args(scene)).item()
    for i in range(20):
        if i % 2 == 0:
            inv = scene.inv_depth * (1 + 0.05 * rng.choice([-1, 1]) * rng.uniform(0.5, 1, scene.inv_depth.shape))
            val = generalized_total(*_args(scene, inv=inv)).item()
        else:
            poses = []
            for p in scene.rel_poses:
                r, x = p.numpy()
                dr = rng.standard_normal(3)
                poses.append(Pose(r + 0.02 * dr / np.linalg.norm(dr), x * (1 + 0.02 * rng.choice([-1, 1], 3))))
            val = generalized_total(*_args(scene, poses=poses)).item()
        assert val > at_truth


def test_gen_depth_loss_near_zero_at_truth(scene):
    m = gen_depth_loss(scene.target, scene.sources, scene.target_depth, scene.rel_poses, scene.intrinsics)
    assert m.values.mean().item() < 0.01
    worse = gen_depth_loss(scene.target, scene.sources, 1.1 * scene.target_depth, scene.rel_poses, scene.intrinsics)
    assert worse.values.mean() > m.values.mean()


def test_gen_depth_loss_identity_ref_poses_is_zero(scene):
    m = gen_depth_loss(scene.target, [scene.target, scene.target], scene.target_depth,
                       [Pose.identity(), Pose.identity()], scene.intrinsics)
    assert m.masked_sum().item() == 0


def test_gen_pose_loss(scene):
    m = gen_pose_loss(scene.target, scene.sources, scene.target_depth, scene.rel_poses, scene.intrinsics)
    assert m.values.mean().item() < 0.01
    rotated = [Pose(p.r.numpy() + [0, 0.05, 0], p.x) for p in scene.rel_poses]
    worse = gen_pose_loss(scene.target, scene.sources, scene.target_depth, rotated, scene.intrinsics)
    assert worse.values.mean() > m.values.mean()
    static = gen_pose_loss(scene.target, [scene.target], scene.target_depth, [Pose.identity()], scene.intrinsics)
    assert static.masked_sum().item() == 0


def test_pose_count_mismatch(scene):
    with pytest.raises(InvalidArgument):
        self_supervised_total(scene.target, scene.sources, scene.inv_depth, scene.rel_poses[:1], scene.intrinsics)


def test_ssim_params_validation():
    with pytest.raises(InvalidArgument):
        SsimParams(window=4)
