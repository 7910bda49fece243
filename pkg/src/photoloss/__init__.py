"""Photometric losses for monocular depth and pose, tested by direct optimization on synthetic scenes."""

__version__ = "0.1.0"

from .errors import AlignmentError, DivergenceError, GenerationError, InvalidArgument, ParseError
from .geometry import Intrinsics, Pose, axis_angle_to_matrix, bilinear_sample, project, warp
from .losses import (LossWeights, PixelLossMap, SsimParams, automask, depth_supervision_loss,
                     direct_supervised_total, gen_depth_loss, gen_pose_loss, generalized_total, pe,
                     pose_supervision_loss, reprojection_loss, self_supervised_total, smoothness_loss, ssim_map)
from .synth import FrameTriplet, SceneSpec, Surface, TextureSpec, default_scene, perturb, render_scene
from .evaluation import Trajectory, align_depth_scale, ape, depth_metrics, umeyama_align
from .optimizer import OptimConfig, OptimProblem, OptimReport, compare_regimes, gradient, optimize
