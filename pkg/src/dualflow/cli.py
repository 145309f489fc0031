"""Command line: ``synth``, ``train``, ``generate``, ``reconstruct``, ``evaluate``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .config import ConfigError, RunConfig
from .errors import DomainError
from .flowmatch import SamplerConfig
from .grids import NormStats
from .io import FormatError, format_kv, load_tensor, read_tum
from .metrics import ALIGNMENT_LABEL, depth_metrics, format_report, traj_metrics
from .pipeline import generate, reconstruct, write_generation, write_scene_files
from .postopt import PostOptConfig, quat_to_rot
from .synth4d import make_scene, render_rgb
from .train import build_model, load_checkpoint, make_clip, train
from .umc import parse_observed

log = logging.getLogger("dualflow")

CONFIG_NAME = "config.txt"


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file applied before command-line flags")
    p.add_argument("--out", default="out", help="output directory")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar=type(f.default).__name__.upper())


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if getattr(args, "size", None) is not None:
        overrides.setdefault("height", args.size)
        overrides.setdefault("width", args.size)
    return cfg.updated(overrides)


def postopt_config(cfg: RunConfig) -> PostOptConfig:
    return PostOptConfig(cfg.alpha_point, cfg.alpha_smooth, cfg.post_iterations, cfg.post_lr,
                         cfg.post_tol, cfg.post_init, cfg.canonicalize)


def cmd_synth(cfg: RunConfig, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_NAME)
    written = []
    for k in range(cfg.scenes):
        seed = cfg.seed + k
        target = out if cfg.scenes == 1 else out / f"scene_{seed:06d}"
        scene = make_scene(seed, cfg.frames, cfg.height, cfg.width)
        write_scene_files(target, scene.cams, scene.depths.depth, scene.pointmaps)
        written.append(target)
    return written


def cmd_train(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_NAME)
    if not cfg.checkpoint and (out / "train_log.txt").exists():
        (out / "train_log.txt").unlink()
    _, params, losses = train(cfg, out, resume=cfg.checkpoint or None)
    if losses:
        log.info("trained to step %d, last loss %.5f", params.t, losses[-1])
    return out / "checkpoint.ckpt"


def _load_inputs(cfg: RunConfig):
    if cfg.scene:
        pm = load_tensor(Path(cfg.scene) / "pointmaps.o4d").to(torch.float64)
        clip = make_clip(pm, cfg.patch)
        return clip.rgb, clip.stats
    if cfg.input:
        return load_tensor(cfg.input).to(torch.float64), None
    raise DomainError("generate needs --input (RGB O4D video) or --scene (synth directory)")


def cmd_generate(cfg: RunConfig, out: Path):
    frames, scene_stats = _load_inputs(cfg)
    if frames.shape[1] == 1 and cfg.frames > 1:
        frames = torch.cat([frames, torch.zeros(3, cfg.frames - 1, *frames.shape[2:], dtype=frames.dtype)], dim=1)
    observed = parse_observed(cfg.observed, frames.shape[1])  # fail before any compute
    if not cfg.checkpoint:
        raise DomainError("generate needs --checkpoint")

    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_NAME)
    model, params = build_model(cfg)
    load_checkpoint(cfg.checkpoint, params, params_only=True)
    if cfg.norm_scale > 0:
        center = tuple(float(x) for x in cfg.norm_center.split(",")) if cfg.norm_center else (0.0, 0.0, 0.0)
        stats = NormStats(center, cfg.norm_scale)
    else:
        stats = scene_stats
    sampler = SamplerConfig(cfg.sample_steps, cfg.cfg_scale, cfg.sample_seed)
    gen = generate(model, frames, observed, sampler, cfg.patch, stats)
    reconstruct(gen, postopt_config(cfg))
    write_generation(out, gen)
    return gen


def _load_eval_dir(d: Path):
    missing = [n for n in ("depths.o4d", "trajectory.txt") if not (d / n).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    depth = load_tensor(d / "depths.o4d").to(torch.float64)[0]
    _, centers, q_xyzw = read_tum(d / "trajectory.txt")
    q_wxyz = torch.tensor(q_xyzw[:, [3, 0, 1, 2]])
    R_w2c = quat_to_rot(q_wxyz).transpose(1, 2)
    return depth, (R_w2c, torch.tensor(centers))


def cmd_evaluate(cfg: RunConfig, pred_dir: Path, gt_dir: Path, report: Path | None = None):
    pd, pc = _load_eval_dir(pred_dir)
    gd, gc = _load_eval_dir(gt_dir)
    d = depth_metrics(pd, gd, align=cfg.align)
    t = traj_metrics(pc, gc, delta=cfg.rpe_delta) if len(gc[1]) >= 2 else None
    rows = format_report(d, t)
    if report:
        report.write_text(format_kv([(k, repr(v)) for k, v in rows] + [("alignment", ALIGNMENT_LABEL if cfg.align else "none")]))
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="write synthetic ground-truth scenes")
    _add_config_flags(p)
    p.add_argument("--size", type=int, help="sets both height and width")
    p = sub.add_parser("train", help="train the toy model")
    _add_config_flags(p)
    for name, help_ in (("generate", "condition, sample and post-optimize"),
                        ("reconstruct", "generate with every frame observed")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
    p = sub.add_parser("evaluate", help="depth and trajectory metrics of a prediction")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--report", help="also write key=value results here")
    p.add_argument("--config")
    p.add_argument("--align", dest="cfg_align")
    p.add_argument("--rpe_delta", dest="cfg_rpe_delta")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            for d in cmd_synth(cfg, Path(args.out)):
                print(d)
        elif args.command == "train":
            print(cmd_train(cfg, Path(args.out)))
        elif args.command in ("generate", "reconstruct"):
            if args.command == "reconstruct":
                cfg = cfg.updated({"observed": "all"})
            cmd_generate(cfg, Path(args.out))
            print(args.out)
        elif args.command == "evaluate":
            rows = cmd_evaluate(cfg, Path(args.pred), Path(args.gt), Path(args.report) if args.report else None)
            for k, v in rows:
                print(f"{k}={v:.6g}")
            print(f"# depth alignment: {ALIGNMENT_LABEL if cfg.align else 'none'}")
    except (ConfigError, DomainError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
