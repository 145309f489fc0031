"""Dense video grids, the lossless space-to-depth codec and pointmap normalization.

Pixel videos and latent grids are plain ``torch.Tensor`` objects laid out as
``(channels, frames, height, width)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError

SCALE_FLOOR = 1e-9


@dataclass(frozen=True)
class NormStats:
    center: tuple[float, float, float]
    scale: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def _check_grid(x: torch.Tensor, name: str):
    if x.dim() != 4:
        raise DimensionError(f"{name} must be (channels, frames, height, width), got shape {tuple(x.shape)}")


def encode(video: torch.Tensor, patch: int = 4) -> torch.Tensor:
    """Space-to-depth: every ``patch x patch`` block of a channel becomes ``patch**2`` channels.

    Latent channel ``ch * patch**2 + dy * patch + dx`` at ``(f, y, x)`` holds pixel
    ``(ch, f, y * patch + dy, x * patch + dx)``.
    """
    _check_grid(video, "video")
    C, F, H, W = video.shape
    if H % patch:
        raise DimensionError(f"height {H} is not divisible by patch {patch}")
    if W % patch:
        raise DimensionError(f"width {W} is not divisible by patch {patch}")
    h, w = H // patch, W // patch
    x = video.reshape(C, F, h, patch, w, patch)
    x = x.permute(0, 3, 5, 1, 2, 4)  # C, dy, dx, F, h, w
    return x.reshape(C * patch * patch, F, h, w).contiguous()


def decode(latent: torch.Tensor, patch: int = 4) -> torch.Tensor:
    """Exact inverse of :func:`encode`."""
    _check_grid(latent, "latent")
    c, f, h, w = latent.shape
    if c % (patch * patch):
        raise DimensionError(f"latent channels {c} are not divisible by patch**2 = {patch * patch}")
    C = c // (patch * patch)
    x = latent.reshape(C, patch, patch, f, h, w)
    x = x.permute(0, 3, 4, 1, 5, 2)  # C, F, h, dy, w, dx
    return x.reshape(C, f, h * patch, w * patch).contiguous()


def normalize_pointmaps(pm: torch.Tensor) -> tuple[torch.Tensor, NormStats]:
    """Map a pointmap clip into [-1, 1] using one bounding box over all frames."""
    _check_grid(pm, "pointmap")
    if pm.shape[0] != 3:
        raise DimensionError(f"pointmaps need 3 channels, got {pm.shape[0]}")
    pts = pm.reshape(3, -1)
    finite = torch.isfinite(pts).all(dim=0)
    if not finite.any():
        raise ValueError("pointmap has no finite points")
    pts = pts[:, finite]
    lo = pts.min(dim=1).values
    hi = pts.max(dim=1).values
    center = (lo + hi) / 2
    half_extent = float(((hi - lo) / 2).max())
    degenerate = half_extent < SCALE_FLOOR
    scale = max(half_extent, SCALE_FLOOR)
    out = (pm - center.view(3, 1, 1, 1)) / scale
    if not degenerate:
        # rounding can push the extreme coordinates a hair past the unit box
        out = out.clamp(-1.0, 1.0)
    stats = NormStats(tuple(float(c) for c in center), scale, degenerate)
    return out, stats


def denormalize_pointmaps(pm: torch.Tensor, stats: NormStats) -> torch.Tensor:
    center = torch.tensor(stats.center, dtype=pm.dtype).view(3, 1, 1, 1)
    return pm * stats.scale + center
