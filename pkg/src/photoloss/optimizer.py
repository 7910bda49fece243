"""Direct gradient-based recovery of inverse depth and relative poses.

Instead of training depth and pose networks, the per-pixel inverse depth and
the 6-dof poses of one frame triplet are optimized as free variables with Adam.
This exercises each training objective's landscape directly: a loss that
supervises depth and pose well should pull free variables back to the truth.
Inverse depth is optimized through its logarithm to stay positive.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import DivergenceError, InvalidArgument
from .evaluation import Trajectory, ape, depth_metrics
from .geometry import DTYPE, Pose
from .losses import LossWeights, SsimParams, direct_supervised_total, generalized_total, self_supervised_total
from .synth import FrameTriplet

log = logging.getLogger(__name__)

REGIMES = ("self-supervised", "direct", "generalized")
FREE_VARS = ("depth", "poses")
GRADIENT_MODES = ("analytic", "fd")


@dataclass(frozen=True)
class OptimConfig:
    max_iters: int = 2000
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tolerance: float = 1e-9
    patience: int = 10
    # step size is multiplied by decay_factor once decay_at * max_iters iterations have run
    decay_at: float = 0.5
    decay_factor: float = 0.1
    gradient_mode: str = "analytic"
    fd_step: float = 1e-4
    # reject steps that raise the loss (see optimize)
    monotone: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if not self.step_size > 0:
            raise InvalidArgument("step size must be positive")
        if not self.tolerance > 0:
            raise InvalidArgument("tolerance must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidArgument("Adam moments need beta in [0, 1) and eps > 0")
        if self.gradient_mode not in GRADIENT_MODES:
            raise InvalidArgument(f"gradient mode must be one of {GRADIENT_MODES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class OptimProblem:
    """What to optimize: a triplet, a loss regime, and which variables are free.

    Initial values default to the triplet's ground truth; references for the
    supervised regimes default to it too.
    """

    triplet: FrameTriplet
    regime: str = "generalized"
    free_vars: frozenset = frozenset(FREE_VARS)
    init_inv_depth: np.ndarray = None
    init_poses: tuple = None
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimParams = field(default_factory=SsimParams)
    ref_inv_depth: np.ndarray = None
    ref_poses: tuple = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidArgument(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        free = frozenset(self.free_vars)
        if not free or not free <= set(FREE_VARS):
            raise InvalidArgument(f"free_vars must be a non-empty subset of {FREE_VARS}")
        object.__setattr__(self, "free_vars", free)
        tr = self.triplet
        if self.init_inv_depth is None:
            object.__setattr__(self, "init_inv_depth", tr.inv_depth)
        if self.init_poses is None:
            object.__setattr__(self, "init_poses", tuple(tr.rel_poses))
        if self.ref_inv_depth is None and tr.target_depth is not None:
            object.__setattr__(self, "ref_inv_depth", tr.inv_depth)
        if self.ref_poses is None and tr.rel_poses is not None:
            object.__setattr__(self, "ref_poses", tuple(tr.rel_poses))
        if self.regime != "self-supervised" and (self.ref_inv_depth is None or self.ref_poses is None):
            raise InvalidArgument(f"regime {self.regime!r} needs reference depth and poses")
        init = np.asarray(self.init_inv_depth, dtype=np.float64)
        if init.shape != tr.intrinsics.shape or not np.all(np.isfinite(init)) or not np.all(init > 0):
            raise InvalidArgument("initial inverse depth must be positive, finite and match the image size")
        if len(self.init_poses) != len(tr.sources):
            raise InvalidArgument("one initial pose per source is required")

    def loss(self, inv_depth, poses):
        """Scalar objective of this problem's regime at ``(inv_depth, poses)``."""
        tr = self.triplet
        args = (tr.target, tr.sources, inv_depth, poses)
        if self.regime == "self-supervised":
            return self_supervised_total(*args, tr.intrinsics, self.weights, self.ssim)
        fn = direct_supervised_total if self.regime == "direct" else generalized_total
        return fn(*args, self.ref_inv_depth, self.ref_poses, tr.intrinsics, self.weights, self.ssim)


def _pack_poses(poses):
    return np.stack([np.concatenate(p.numpy()) for p in poses])


def _unpack_poses(params):
    params = torch.as_tensor(params, dtype=DTYPE)
    return [Pose(row[:3], row[3:]) for row in params]


@dataclass(frozen=True, eq=False)
class Gradient:
    """Gradient w.r.t. inverse depth (``H x W``) and poses (``n x 6``, rotation then translation).

    Entries for variables that are not free are ``None``.
    """

    loss: float
    inv_depth: np.ndarray = None
    poses: np.ndarray = None


def _point(problem, point):
    if point is None:
        return np.asarray(problem.init_inv_depth, dtype=np.float64), _pack_poses(problem.init_poses)
    inv, poses = point
    return np.asarray(inv, dtype=np.float64), (poses if isinstance(poses, np.ndarray) else _pack_poses(poses))


def analytic_gradient(problem: OptimProblem, point=None) -> Gradient:
    inv, pp = _point(problem, point)
    inv_t = torch.tensor(inv, requires_grad="depth" in problem.free_vars)
    pp_t = torch.tensor(pp, requires_grad="poses" in problem.free_vars)
    loss = problem.loss(inv_t, _unpack_poses(pp_t))
    loss.backward()
    return Gradient(
        loss=loss.item(),
        inv_depth=inv_t.grad.numpy().copy() if inv_t.grad is not None else (np.zeros_like(inv) if inv_t.requires_grad else None),
        poses=pp_t.grad.numpy().copy() if pp_t.grad is not None else (np.zeros_like(pp) if pp_t.requires_grad else None),
    )


@dataclass(frozen=True, eq=False)
class FiniteDifference:
    """Central differences plus a kink flag per coordinate.

    A coordinate is flagged when its forward and backward one-sided differences
    disagree by more than smooth curvature allows, which happens where a mask,
    the min over sources, or an interpolation cell boundary switches inside
    the step.
    """

    gradient: Gradient
    depth_kink: np.ndarray = None
    pose_kink: np.ndarray = None


def finite_difference_gradient(problem: OptimProblem, point=None, step=1e-4, pixels=None, kink_tol=1e-2):
    """Central-difference gradient; ``pixels`` (list of ``(row, col)``) limits the depth coordinates.

    Depth entries outside ``pixels`` are NaN.
    """
    inv, pp = _point(problem, point)

    def f(inv_, pp_):
        with torch.no_grad():
            return problem.loss(torch.tensor(inv_), _unpack_poses(pp_)).item()

    f0 = f(inv, pp)

    def diff(plus, minus):
        fwd, bwd = (plus - f0) / step, (f0 - minus) / step
        kink = abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd)) + 1e-10
        return (plus - minus) / (2 * step), kink

    g_inv = kink_inv = g_pose = kink_pose = None
    if "depth" in problem.free_vars:
        g_inv = np.full(inv.shape, np.nan)
        kink_inv = np.zeros(inv.shape, dtype=bool)
        if pixels is None:
            pixels = [(i, j) for i in range(inv.shape[0]) for j in range(inv.shape[1])]
        for i, j in pixels:
            a, b = inv.copy(), inv.copy()
            a[i, j] += step
            b[i, j] -= step
            g_inv[i, j], kink_inv[i, j] = diff(f(a, pp), f(b, pp))
    if "poses" in problem.free_vars:
        g_pose = np.zeros(pp.shape)
        kink_pose = np.zeros(pp.shape, dtype=bool)
        for idx in np.ndindex(pp.shape):
            a, b = pp.copy(), pp.copy()
            a[idx] += step
            b[idx] -= step
            g_pose[idx], kink_pose[idx] = diff(f(inv, a), f(inv, b))
    return FiniteDifference(Gradient(f0, g_inv, g_pose), kink_inv, kink_pose)


def gradient(problem: OptimProblem, point=None, mode="analytic", step=1e-4) -> Gradient:
    """Gradient of the problem's loss w.r.t. inverse depth and pose parameters."""
    if mode == "analytic":
        return analytic_gradient(problem, point)
    if mode == "fd":
        return finite_difference_gradient(problem, point, step).gradient
    raise InvalidArgument(f"gradient mode must be one of {GRADIENT_MODES}")


def relative_error(a, b, floor=1e-9):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass(frozen=True, eq=False)
class GradCheck:
    depth_rel_err: np.ndarray
    depth_checked: np.ndarray
    pose_rel_err: np.ndarray
    pose_checked: np.ndarray
    rtol: float

    @property
    def depth_pass_fraction(self):
        if self.depth_rel_err is None:
            return 1.0
        ok = self.depth_rel_err[self.depth_checked] <= self.rtol
        return float(ok.mean()) if ok.size else 0.0

    @property
    def pose_pass_fraction(self):
        if self.pose_rel_err is None:
            return 1.0
        ok = self.pose_rel_err[self.pose_checked] <= self.rtol
        return float(ok.mean()) if ok.size else 0.0


def check_gradient(problem: OptimProblem, point=None, step=1e-4, rtol=1e-3, margin=2, pixels=None) -> GradCheck:
    """Compare analytic gradients with central differences.

    Depth is checked on pixels at least ``margin`` away from the border (or on
    ``pixels``); kinked coordinates are skipped.
    """
    ana = analytic_gradient(problem, point)
    H, W = problem.triplet.intrinsics.shape
    if pixels is None:
        pixels = [(i, j) for i in range(margin, H - margin) for j in range(margin, W - margin)]
    fd = finite_difference_gradient(problem, point, step, pixels=pixels)
    d_err = d_chk = p_err = p_chk = None
    if ana.inv_depth is not None:
        sel = np.zeros((H, W), dtype=bool)
        sel[tuple(np.array(pixels).T)] = True
        d_err = np.where(sel, relative_error(ana.inv_depth, np.nan_to_num(fd.gradient.inv_depth)), np.nan)
        d_chk = sel & ~fd.depth_kink
    if ana.poses is not None:
        p_err = relative_error(ana.poses, fd.gradient.poses)
        p_chk = ~fd.pose_kink
    return GradCheck(d_err, d_chk, p_err, p_chk, rtol)


@dataclass(frozen=True, eq=False)
class OptimReport:
    regime: str
    loss_trace: list
    initial_loss: float
    inv_depth: np.ndarray
    poses: list
    iterations: int
    duration: float
    converged: bool

    @property
    def final_loss(self):
        return self.loss_trace[-1] if self.loss_trace else self.initial_loss

    def to_dict(self):
        return {"regime": self.regime, "iterations": self.iterations, "converged": self.converged,
                "initial_loss": self.initial_loss, "final_loss": self.final_loss,
                "poses": [p.to_dict() for p in self.poses]}


def _adam_direction(m, v, g, it, cfg):
    """Update Adam moments in place and return the bias-corrected step direction."""
    m *= cfg.beta1
    m += (1 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1 - cfg.beta2) * g * g
    bc1 = 1 - cfg.beta1**it
    bc2 = 1 - cfg.beta2**it
    return (m / bc1) / (np.sqrt(v) / np.sqrt(bc2) + cfg.eps)


def optimize(problem: OptimProblem, cfg: OptimConfig = OptimConfig()) -> OptimReport:
    """Adam descent on the free variables of ``problem``.

    Stops after ``cfg.max_iters`` or once the relative loss change stays below
    ``cfg.tolerance`` for ``cfg.patience`` consecutive iterations. Each trace
    entry is the loss at the iterate held after that iteration.

    With ``cfg.monotone`` a step that raises the loss is rejected (the iterate
    stays put, the moments keep the new gradient) and the step scale halves;
    accepted steps double it back up to 1. Rejected iterations do not count
    towards convergence.
    """
    start = time.perf_counter()
    free_depth = "depth" in problem.free_vars
    free_poses = "poses" in problem.free_vars
    log_inv = np.log(np.asarray(problem.init_inv_depth, dtype=np.float64))
    pose_params = _pack_poses(problem.init_poses)

    def evaluate(log_inv, pose_params, it):
        with np.errstate(over="ignore"):
            inv = np.exp(log_inv)
        if not (np.all(np.isfinite(inv)) and np.all(inv > 0) and np.all(np.isfinite(pose_params))):
            raise DivergenceError("inverse depth or pose left the finite range", it)
        g = gradient(problem, (inv, pose_params), cfg.gradient_mode, cfg.fd_step)
        if not np.isfinite(g.loss):
            raise DivergenceError("non-finite loss", it)
        g_log = g.inv_depth * inv if free_depth else None  # chain rule through exp
        for part in (g_log, g.poses):
            if part is not None and not np.all(np.isfinite(part)):
                raise DivergenceError("non-finite gradient", it)
        return g.loss, g_log, g.poses

    value, g_log, g_pose = evaluate(log_inv, pose_params, 0)
    initial = value
    m_log, v_log = np.zeros_like(log_inv), np.zeros_like(log_inv)
    m_pose, v_pose = np.zeros_like(pose_params), np.zeros_like(pose_params)
    decay_iter = int(cfg.decay_at * cfg.max_iters)
    trace = []
    scale = 1.0
    stall = 0
    converged = False
    for it in range(1, cfg.max_iters + 1):
        lr = cfg.step_size * scale * (cfg.decay_factor if 0 < decay_iter < it else 1.0)
        cand_log, cand_pose = log_inv, pose_params
        if free_depth:
            cand_log = log_inv - lr * _adam_direction(m_log, v_log, g_log, it, cfg)
        if free_poses:
            cand_pose = pose_params - lr * _adam_direction(m_pose, v_pose, g_pose, it, cfg)
        c_value, c_log, c_pose = evaluate(cand_log, cand_pose, it)
        if cfg.monotone and c_value > value:
            scale *= 0.5
            change = None
        else:
            change = abs(c_value - value) / max(abs(value), 1e-12)
            log_inv, pose_params = cand_log, cand_pose
            value, g_log, g_pose = c_value, c_log, c_pose
            if cfg.monotone:
                scale = min(1.0, 2.0 * scale)
        trace.append(value)
        assert np.all(np.exp(log_inv) > 0)
        if change is not None:
            stall = stall + 1 if change < cfg.tolerance else 0
        if stall >= cfg.patience:
            converged = True
            break
    log.debug("%s: %d iterations, loss %.3g -> %.3g", problem.regime, len(trace), initial, value)
    return OptimReport(
        regime=problem.regime,
        loss_trace=trace,
        initial_loss=initial,
        inv_depth=np.exp(log_inv),
        poses=_unpack_poses(pose_params.copy()),
        iterations=len(trace),
        duration=time.perf_counter() - start,
        converged=converged,
    )


def pose_trajectory(rel_poses):
    """Three-frame trajectory ``[t-1, t, t+1]`` in the target camera frame."""
    prev, nxt = rel_poses
    return Trajectory.from_poses([prev.inverse(), Pose.identity(), nxt.inverse()])


def evaluate_report(report: OptimReport, triplet: FrameTriplet):
    """Depth metrics (global scale aligned) and unaligned pose errors of a finished run."""
    dm = depth_metrics(1.0 / report.inv_depth, triplet.target_depth)
    # a 3-frame triplet can be collinear, so pose errors are taken without similarity alignment
    pm = ape(pose_trajectory(report.poses), pose_trajectory(triplet.rel_poses), align=False)
    return dm, pm


def compare_regimes(triplet: FrameTriplet, init_inv_depth, init_poses, cfg: OptimConfig = OptimConfig(),
                    weights: LossWeights = LossWeights(), ssim: SsimParams = SsimParams(),
                    regimes=REGIMES, free_vars=FREE_VARS):
    """Run each regime from the same initialization and evaluate the results.

    Returns ``(record, reports)``: a JSON-ready comparison and the raw reports.
    """
    record = {"regimes": {}}
    reports = {}
    for regime in regimes:
        problem = OptimProblem(triplet, regime, frozenset(free_vars), init_inv_depth, tuple(init_poses), weights, ssim)
        rep = optimize(problem, cfg)
        dm, pm = evaluate_report(rep, triplet)
        reports[regime] = rep
        record["regimes"][regime] = {"optim": rep.to_dict(), "depth": dm.to_dict(), "pose": pm.to_dict()}
    return record, reports
