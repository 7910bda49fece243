"""Command-line front end: ``photoloss {generate,optimize,compare-losses,eval-depth,eval-pose}``.

Machine-readable JSON goes to stdout (or to files under ``--out``); human
tables go to stderr. Exit codes: 0 success, 1 usage/config error, 2 numerical
divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, dumps, load_config
from .errors import AlignmentError, DivergenceError, GenerationError, InvalidArgument, ParseError
from .evaluation import DEFAULT_SEGMENT_LEN, Trajectory, ape, depth_metrics
from .io import read_pfm, read_tum, write_pfm, write_png, write_text, write_tum
from .optimizer import REGIMES, GRADIENT_MODES, OptimProblem, evaluate_report, optimize
from .synth import perturb, render_frames, render_scene

log = logging.getLogger("photoloss")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2


def _tool():
    return {"name": "photoloss", "version": __version__}


def _table(title, rows):
    width = max(len(k) for k, _ in rows)
    lines = [title, "-" * max(len(title), width + 14)]
    for k, v in rows:
        lines.append(f"{k:<{width}}  {v:>12.6g}" if isinstance(v, float) else f"{k:<{width}}  {v!s:>12}")
    return "\n".join(lines)


def _out_dir(args, cfg: ExperimentConfig | None = None):
    out = Path(args.out if args.out is not None else (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: ExperimentConfig, out: Path):
    """Frames as PNG, depths as PFM, camera-to-world trajectory as TUM."""
    write_text(out / "config.json", dumps({"tool": _tool(), "config": cfg.to_dict()}))
    written = []
    for k, (raw, spec) in enumerate(zip(cfg.scenes, cfg.scene_specs())):
        d = out / f"scene_{k:02d}"
        d.mkdir(exist_ok=True)
        images, depths = render_frames(spec)
        for i, (img, depth) in enumerate(zip(images, depths)):
            write_png(d / f"frame_{i:03d}.png", img, bits=cfg.image_bits)
            write_pfm(d / f"depth_{i:03d}.pfm", depth)
        write_tum(d / "trajectory.txt", Trajectory.from_poses(spec.trajectory))
        write_text(d / "scene.json", dumps(raw))
        written.append(str(d))
    return written


def _run_name(k, index, regime):
    return f"scene{k:02d}_t{index:03d}_{regime}"


def cmd_optimize(cfg: ExperimentConfig, out: Path, regimes=None):
    """Optimize every triplet of every scene under each requested regime.

    Returns ``(report, timings, diverged)``. The report holds no wall-clock
    data so that it is byte-identical across runs; timings are kept apart.
    """
    regimes = tuple(regimes or cfg.regimes)
    (out / "traces").mkdir(exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    runs, timings, diverged = [], {}, False
    summary = {r: {"depth_rel_mean": [], "rot_mean": [], "trans_mean": []} for r in regimes}
    for k, spec in enumerate(cfg.scene_specs()):
        for triplet in render_scene(spec):
            pt = cfg.perturbation
            init = perturb(triplet, pt.depth, pt.rotation, pt.translation, seed=[cfg.seed, k, triplet.index])
            entry = {"scene": k, "frame": triplet.index, "regimes": {}}
            for regime in regimes:
                name = _run_name(k, triplet.index, regime)
                problem = OptimProblem(triplet, regime, frozenset(cfg.free_vars), init.inv_depth, init.rel_poses,
                                       cfg.weights, cfg.ssim)
                try:
                    rep = optimize(problem, cfg.optim)
                except DivergenceError as exc:
                    log.error("%s diverged: %s", name, exc)
                    entry["regimes"][regime] = {"diverged": True, "iteration": exc.iteration, "error": str(exc)}
                    diverged = True
                    continue
                dm, pm = evaluate_report(rep, triplet)
                timings[name] = rep.duration
                rows = "".join(f"{i},{v:.9g}\n" for i, v in enumerate(rep.loss_trace, start=1))
                write_text(out / "traces" / f"{name}.csv", "iteration,loss\n" + rows)
                write_pfm(out / "depth" / f"{name}.pfm", 1.0 / rep.inv_depth)
                entry["regimes"][regime] = {"diverged": False, "optim": rep.to_dict(), "depth": dm.to_dict(),
                                            "pose": pm.to_dict(), "trace": f"traces/{name}.csv"}
                summary[regime]["depth_rel_mean"].append(dm.rel_mean)
                summary[regime]["rot_mean"].append(pm.rot_mean)
                summary[regime]["trans_mean"].append(pm.trans_mean)
            runs.append(entry)
    report = {
        "tool": _tool(),
        "config": cfg.to_dict(),
        "regimes": list(regimes),
        "runs": runs,
        "summary": {r: {key: (float(np.mean(v)) if v else None) for key, v in s.items()} for r, s in summary.items()},
    }
    write_text(out / "report.json", dumps(report))
    write_text(out / "timings.json", dumps(timings))
    return report, timings, diverged


def _read_depth_dir(path):
    files = sorted(Path(path).glob("*.pfm"))
    if not files:
        raise InvalidArgument(f"no .pfm files in {path}")
    return [read_pfm(f).astype(np.float64) for f in files]


def cmd_eval_depth(pred_dir, ref_dir, per_frame=False):
    pred, ref = _read_depth_dir(pred_dir), _read_depth_dir(ref_dir)
    if len(pred) != len(ref):
        raise InvalidArgument(f"{len(pred)} predicted depth maps in {pred_dir} vs {len(ref)} in {ref_dir}")
    return depth_metrics(pred, ref, per_frame=per_frame)


def cmd_eval_pose(pred_file, ref_file, segment_len=DEFAULT_SEGMENT_LEN, align=True):
    return ape(read_tum(pred_file), read_tum(ref_file), segment_len=segment_len, align=align)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="photoloss", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"photoloss {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render synthetic scenes")
    helps = {"optimize": "recover depth and poses by direct optimization",
             "compare-losses": "run every loss regime from the same perturbed start"}
    for name in ("optimize", "compare-losses"):
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "optimize":
            sp.add_argument("--regime", choices=REGIMES, help="run a single regime")
        sp.add_argument("--gradient-mode", choices=GRADIENT_MODES)
    sp = sub.add_parser("eval-depth", parents=[common], help="scale-aligned depth metrics for two PFM directories")
    sp.add_argument("pred_dir")
    sp.add_argument("ref_dir")
    sp.add_argument("--per-frame-scale", action="store_true", help="align each frame separately")
    sp = sub.add_parser("eval-pose", parents=[common], help="absolute pose error for two TUM files")
    sp.add_argument("pred_file")
    sp.add_argument("ref_file")
    sp.add_argument("--segment-len", type=int, default=DEFAULT_SEGMENT_LEN)
    sp.add_argument("--no-align", action="store_true", help="skip Umeyama alignment (e.g. collinear trajectories)")
    return p


def _set_threads():
    n = os.environ.get("PHOTOLOSS_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise InvalidArgument(f"PHOTOLOSS_THREADS must be an integer, got {n!r}") from None


def _emit_metrics(args, title, metrics, filename):
    text = dumps(metrics.to_dict())
    if args.out is not None:
        write_text(_out_dir(args) / filename, text)
    sys.stdout.write(text)
    print(_table(title, list(metrics.to_dict().items())), file=sys.stderr)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        if args.command == "eval-depth":
            _emit_metrics(args, "depth metrics", cmd_eval_depth(args.pred_dir, args.ref_dir, args.per_frame_scale),
                          "depth_metrics.json")
            return EXIT_OK
        if args.command == "eval-pose":
            if args.segment_len < 3:
                raise InvalidArgument("--segment-len must be at least 3")
            metrics = cmd_eval_pose(args.pred_file, args.ref_file, args.segment_len, align=not args.no_align)
            _emit_metrics(args, "absolute pose error", metrics, "ape.json")
            return EXIT_OK
        cfg = load_config(args.config, seed=args.seed)
        if getattr(args, "gradient_mode", None):
            cfg = replace(cfg, optim=replace(cfg.optim, gradient_mode=args.gradient_mode))
        out = _out_dir(args, cfg)
        if args.command == "generate":
            for d in cmd_generate(cfg, out):
                print(d)
            return EXIT_OK
        regimes = REGIMES if args.command == "compare-losses" else ([args.regime] if args.regime else None)
        t0 = time.perf_counter()
        report, _, diverged = cmd_optimize(cfg, out, regimes)
        rows = [(f"{r} {key}", v) for r, s in report["summary"].items() for key, v in s.items()]
        print(_table(f"regime comparison ({time.perf_counter() - t0:.1f} s)", rows), file=sys.stderr)
        print(out / "report.json")
        return EXIT_DIVERGED if diverged else EXIT_OK
    except (ParseError, InvalidArgument, AlignmentError, GenerationError, OSError) as exc:
        print(f"photoloss: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"photoloss: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main():
    sys.exit(run())
