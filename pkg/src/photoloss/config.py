"""Experiment configuration (JSON) and deterministic JSON output."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidArgument, ParseError
from .geometry import Intrinsics, Pose
from .losses import LossWeights, SsimParams
from .optimizer import FREE_VARS, REGIMES, OptimConfig
from .synth import SceneSpec, Surface, TextureSpec, translating_trajectory


def _round_floats(obj, digits=9):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _round_floats(obj.item(), digits)
    return obj


def dumps(obj) -> str:
    """JSON with insertion-ordered keys and floats at 9 significant digits."""
    return json.dumps(_round_floats(obj), indent=2) + "\n"


@dataclass(frozen=True)
class PerturbationSpec:
    """Noise applied to the ground truth to form the optimizer's starting point."""

    depth: float = 0.1
    rotation: float = 0.02
    translation: float = 0.02

    def __post_init__(self):
        if min(self.depth, self.rotation, self.translation) < 0:
            raise InvalidArgument("perturbation magnitudes must be non-negative")

    def to_dict(self):
        return {"depth": self.depth, "rotation": self.rotation, "translation": self.translation}


def _normalize_trajectory(t):
    if isinstance(t, dict):
        kind = t.get("kind", "translating")
        if kind != "translating":
            raise InvalidArgument(f"unknown trajectory kind {kind!r}")
        unknown = set(t) - {"kind", "n", "step", "rotation_step"}
        if unknown:
            raise InvalidArgument(f"unknown trajectory keys {sorted(unknown)}")
        return {"kind": "translating", "n": int(t.get("n", 3)),
                "step": [float(v) for v in t.get("step", (0.1, 0.0, 0.0))],
                "rotation_step": [float(v) for v in t.get("rotation_step", (0.0, 0.0, 0.0))]}
    return [Pose.from_dict(p).to_dict() for p in t]


def _build_trajectory(t):
    if isinstance(t, dict):
        return translating_trajectory(t["n"], t["step"], t["rotation_step"])
    return tuple(Pose.from_dict(p) for p in t)


SCENE_KEYS = {"surface", "texture", "trajectory", "intrinsics", "channels"}


def normalize_scene(d, default_seed):
    """Fill defaults so the echoed form re-parses to the same dictionary."""
    if not isinstance(d, dict):
        raise InvalidArgument("scene must be an object")
    unknown = set(d) - SCENE_KEYS
    if unknown:
        raise InvalidArgument(f"unknown scene keys {sorted(unknown)}")
    tex = dict(d.get("texture", {}))
    tex.setdefault("seed", default_seed)
    out = {
        "surface": Surface.from_dict(d.get("surface", {})).to_dict(),
        "texture": TextureSpec.from_dict(tex).to_dict(),
        "trajectory": _normalize_trajectory(d.get("trajectory", {"kind": "translating"})),
        "intrinsics": (Intrinsics.from_dict(d["intrinsics"]) if "intrinsics" in d else Intrinsics.default()).to_dict(),
        "channels": int(d.get("channels", 1)),
    }
    build_scene(out)
    return out


def build_scene(d) -> SceneSpec:
    return SceneSpec(surface=Surface.from_dict(d["surface"]), texture=TextureSpec.from_dict(d["texture"]),
                     trajectory=_build_trajectory(d["trajectory"]), intrinsics=Intrinsics.from_dict(d["intrinsics"]),
                     channels=d["channels"])


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    seed: int
    scenes: tuple = ()
    regimes: tuple = REGIMES
    free_vars: tuple = FREE_VARS
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimParams = field(default_factory=SsimParams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    output_dir: str = "out"
    image_bits: int = 8

    def scene_specs(self):
        return [build_scene(s) for s in self.scenes]

    def to_dict(self):
        return {
            "seed": self.seed,
            "scenes": [dict(s) for s in self.scenes],
            "regimes": list(self.regimes),
            "free_vars": list(self.free_vars),
            "weights": self.weights.to_dict(),
            "ssim": self.ssim.to_dict(),
            "optim": self.optim.to_dict(),
            "perturbation": self.perturbation.to_dict(),
            "output_dir": self.output_dir,
            "image_bits": self.image_bits,
        }


TOP_KEYS = {"seed", "scenes", "scene", "regimes", "free_vars", "weights", "ssim", "optim",
            "perturbation", "output_dir", "image_bits"}


def _section(d, key, build):
    try:
        return build(d[key]) if key in d else build({})
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), field=key) from None


def config_from_dict(d, seed=None) -> ExperimentConfig:
    """Validate a config dictionary; ``seed`` overrides the file's seed."""
    if not isinstance(d, dict):
        raise ParseError("config must be a JSON object")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ParseError(f"unknown key(s) {sorted(unknown)}", field=sorted(unknown)[0])
    if seed is None:
        if "seed" not in d:
            raise ParseError("a seed is required (set it in the config or pass --seed)", field="seed")
        seed = d["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ParseError("seed must be an integer", field="seed")
    raw_scenes = d.get("scenes", [d["scene"]] if "scene" in d else [{}])
    if not isinstance(raw_scenes, list) or not raw_scenes:
        raise ParseError("scenes must be a non-empty list", field="scenes")
    scenes = []
    for i, s in enumerate(raw_scenes):
        try:
            scenes.append(normalize_scene(s, seed + i))
        except (TypeError, ValueError, KeyError) as exc:
            raise ParseError(str(exc), field=f"scenes[{i}]") from None
    regimes = tuple(d.get("regimes", REGIMES))
    for r in regimes:
        if r not in REGIMES:
            raise ParseError(f"unknown regime {r!r}; expected one of {REGIMES}", field="regimes")
    free_vars = tuple(d.get("free_vars", FREE_VARS))
    if not free_vars or not set(free_vars) <= set(FREE_VARS):
        raise ParseError(f"free_vars must be a non-empty subset of {FREE_VARS}", field="free_vars")
    bits = d.get("image_bits", 8)
    if bits not in (8, 16):
        raise ParseError("image_bits must be 8 or 16", field="image_bits")
    return ExperimentConfig(
        seed=seed,
        scenes=tuple(scenes),
        regimes=regimes,
        free_vars=free_vars,
        weights=_section(d, "weights", LossWeights.from_dict),
        ssim=_section(d, "ssim", lambda s: SsimParams(**s)),
        optim=_section(d, "optim", OptimConfig.from_dict),
        perturbation=_section(d, "perturbation", lambda s: PerturbationSpec(**s)),
        output_dir=str(d.get("output_dir", "out")),
        image_bits=bits,
    )


def load_config(path=None, seed=None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({}, seed=seed)
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from None
    return config_from_dict(d, seed=seed)
