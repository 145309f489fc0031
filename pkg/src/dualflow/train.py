"""Toy joint RGB + pointmap flow-matching training with task-mixed masked conditioning."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, DualBranchDiT
from .config import RunConfig
from .errors import NumericError
from .flowmatch import fm_loss, noise_latent, velocity_target
from .grids import NormStats, encode, normalize_pointmaps
from .io import load_records, load_tensor, save_records
from .optim import OptimConfig, ParamSet, grad, step
from .synth4d import make_scene, render_rgb
from .umc import build_condition, condition_latents, observed_for_task, sample_task

log = logging.getLogger(__name__)


@dataclass
class Clip:
    rgb: torch.Tensor  # (3, F, H, W) in [-1, 1]
    pointmaps: torch.Tensor  # normalized, (3, F, H, W)
    stats: NormStats
    z_rgb: torch.Tensor
    z_xyz: torch.Tensor


def make_clip(pointmaps: torch.Tensor, patch: int, dtype=torch.float64) -> Clip:
    pointmaps = pointmaps.to(torch.float64)
    rgb = render_rgb(pointmaps)
    pm, stats = normalize_pointmaps(pointmaps)
    rgb, pm = rgb.to(dtype), pm.to(dtype)
    return Clip(rgb, pm, stats, encode(rgb, patch), encode(pm, patch))


def load_clips(cfg: RunConfig) -> list[Clip]:
    """Scenes from ``cfg.data`` (subdirectories holding ``pointmaps.o4d``) or synthesized ones."""
    dtype = BackboneConfig(dtype=cfg.dtype).torch_dtype
    if cfg.data:
        dirs = sorted(p.parent for p in Path(cfg.data).glob("*/pointmaps.o4d"))
        if not dirs and (Path(cfg.data) / "pointmaps.o4d").exists():
            dirs = [Path(cfg.data)]
        if not dirs:
            raise FileNotFoundError(f"no pointmaps.o4d found under {cfg.data}")
        return [make_clip(load_tensor(d / "pointmaps.o4d"), cfg.patch, dtype) for d in dirs]
    return [make_clip(make_scene(cfg.seed + 1 + k, cfg.frames, cfg.height, cfg.width).pointmaps, cfg.patch, dtype)
            for k in range(cfg.clips)]


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    return BackboneConfig(
        layers=cfg.layers, token_dim=cfg.token_dim, heads=cfg.heads, latent_patch=cfg.latent_patch,
        links=cfg.links, lora_rank=cfg.lora_rank, lora_scale=cfg.lora_scale,
        latent_channels=3 * cfg.patch ** 2, mask_channels=cfg.patch ** 2, seed=cfg.base_seed, dtype=cfg.dtype)


def build_model(cfg: RunConfig) -> tuple[DualBranchDiT, ParamSet]:
    model = DualBranchDiT(backbone_config(cfg))
    return model, ParamSet(model.named_parameters())


def step_rng(seed: int, step_index: int) -> np.random.Generator:
    # one independent stream per step, so a resumed run draws exactly what it would have
    return np.random.default_rng([seed, step_index])


def training_loss(model: DualBranchDiT, clip: Clip, cfg: RunConfig, rng: np.random.Generator) -> torch.Tensor:
    n_frames = clip.rgb.shape[1]
    task = sample_task(rng, cfg.ratios)
    observed = observed_for_task(task, n_frames, rng, (cfg.sparsity_min, cfg.sparsity_max))
    drop = rng.random() < cfg.cond_dropout
    t = float(rng.uniform(0.0, 1.0))
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2 ** 62)))
    eps_rgb = torch.randn(clip.z_rgb.shape, generator=gen, dtype=clip.z_rgb.dtype)
    eps_xyz = torch.randn(clip.z_xyz.shape, generator=gen, dtype=clip.z_xyz.dtype)

    z_c, m_lat = condition_latents(build_condition(clip.rgb, observed), cfg.patch)
    if drop:
        z_c, m_lat = torch.zeros_like(z_c), torch.zeros_like(m_lat)
    zt_rgb = noise_latent(clip.z_rgb, eps_rgb, t)
    zt_xyz = noise_latent(clip.z_xyz, eps_xyz, t)
    v_rgb, v_xyz = model.velocity(zt_rgb, zt_xyz, (z_c, m_lat), t)
    return fm_loss(v_rgb, velocity_target(clip.z_rgb, eps_rgb), v_xyz, velocity_target(clip.z_xyz, eps_xyz))


def save_checkpoint(path, params: ParamSet) -> None:
    dtypes = {p.dtype for _, p in params}
    save_records(path, params.state_records(), version=2 if torch.float64 in dtypes else 1)


def load_checkpoint(path, params: ParamSet, params_only: bool = False) -> None:
    params.load_records(load_records(path), params_only=params_only)


def train(cfg: RunConfig, out_dir=None, clips: list[Clip] | None = None, resume=None,
          until: int | None = None):
    """Run flow-matching steps ``params.t .. until`` (default ``cfg.steps``).

    Returns ``(model, params, losses)``; ``losses`` covers only the steps run here.
    """
    clips = load_clips(cfg) if clips is None else clips
    model, params = build_model(cfg)
    if resume:
        load_checkpoint(resume, params)
    ocfg = OptimConfig(lr=cfg.lr)
    until = cfg.steps if until is None else until
    out = Path(out_dir) if out_dir else None
    losses = []
    for k in range(params.t, until):
        rng = step_rng(cfg.seed, k)
        picks = [clips[int(rng.integers(len(clips)))] for _ in range(cfg.batch)]

        def objective():
            return sum(training_loss(model, clip, cfg, rng) for clip in picks) / len(picks)

        try:
            value = grad(objective, params)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {k}: {exc}") from exc
        step(params, ocfg)
        losses.append(value)
        if k % 100 == 0:
            log.info("step %d loss %.5f", k, value)
        if out and cfg.ckpt_every and (k + 1) % cfg.ckpt_every == 0:
            save_checkpoint(out / f"checkpoint_{k + 1:06d}.ckpt", params)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.ckpt", params)
        with open(out / "train_log.txt", "a") as f:
            start = params.t - len(losses)
            for i, v in enumerate(losses):
                f.write(f"{start + i} {v!r}\n")
    return model, params, losses
