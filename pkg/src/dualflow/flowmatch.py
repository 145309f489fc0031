"""Rectified-flow noising, velocity targets, the joint loss and the guided Euler sampler.

Time runs from t=0 (pure noise) to t=1 (clean data) everywhere in this package.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import DimensionError, DomainError, NumericError

# (z_rgb_t, z_xyz_t, cond, t) -> (v_rgb, v_xyz); cond is a tuple of latent grids
VelocityModel = Callable[[torch.Tensor, torch.Tensor, Sequence[torch.Tensor], float],
                         tuple[torch.Tensor, torch.Tensor]]


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise DomainError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def noise_latent(z: torch.Tensor, eps: torch.Tensor, t: float) -> torch.Tensor:
    _same_shape(z, eps, "noise_latent")
    if not 0.0 <= float(t) <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if t == 1:
        return z.clone()
    if t == 0:
        return eps.clone()
    return t * z + (1 - t) * eps


def velocity_target(z: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _same_shape(z, eps, "velocity_target")
    return z - eps


def fm_loss(v_pred_rgb, v_tgt_rgb, v_pred_xyz, v_tgt_xyz) -> torch.Tensor:
    """Sum of the per-modality mean squared velocity errors."""
    _same_shape(v_pred_rgb, v_tgt_rgb, "fm_loss rgb")
    _same_shape(v_pred_xyz, v_tgt_xyz, "fm_loss xyz")
    return ((v_pred_rgb - v_tgt_rgb) ** 2).mean() + ((v_pred_xyz - v_tgt_xyz) ** 2).mean()


def initial_noise(shape_rgb, shape_xyz, seed: int, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    eps_rgb = torch.randn(shape_rgb, generator=gen, dtype=dtype)
    eps_xyz = torch.randn(shape_xyz, generator=gen, dtype=dtype)
    return eps_rgb, eps_xyz


@torch.no_grad()
def sample(model: VelocityModel, cond: Sequence[torch.Tensor], cfg: SamplerConfig,
           shape_rgb, shape_xyz=None, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Integrate dz/dt = v from seeded noise at t=0 to t=1 with classifier-free guidance.

    The unconditional pass sees every conditioning grid zeroed. With
    ``cfg_scale == 1`` it cancels, so it is skipped.
    """
    shape_xyz = shape_rgb if shape_xyz is None else shape_xyz
    z_rgb, z_xyz = initial_noise(shape_rgb, shape_xyz, cfg.seed, dtype)
    uncond = tuple(torch.zeros_like(c) for c in cond)
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k * dt
        v_rgb, v_xyz = _checked(model(z_rgb, z_xyz, cond, t), z_rgb, z_xyz, k)
        if cfg.cfg_scale != 1.0:
            u_rgb, u_xyz = _checked(model(z_rgb, z_xyz, uncond, t), z_rgb, z_xyz, k)
            v_rgb = u_rgb + cfg.cfg_scale * (v_rgb - u_rgb)
            v_xyz = u_xyz + cfg.cfg_scale * (v_xyz - u_xyz)
        z_rgb = z_rgb + dt * v_rgb
        z_xyz = z_xyz + dt * v_xyz
    return z_rgb, z_xyz


def _checked(out, z_rgb, z_xyz, step):
    v_rgb, v_xyz = out
    if v_rgb.shape != z_rgb.shape or v_xyz.shape != z_xyz.shape:
        raise DimensionError(
            f"model returned {tuple(v_rgb.shape)}/{tuple(v_xyz.shape)}, "
            f"expected {tuple(z_rgb.shape)}/{tuple(z_xyz.shape)}")
    if not (torch.isfinite(v_rgb).all() and torch.isfinite(v_xyz).all()):
        raise NumericError(f"non-finite velocity at sampling step {step}")
    return v_rgb, v_xyz
