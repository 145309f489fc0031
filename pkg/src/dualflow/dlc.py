"""Decoupled LoRA control: per-stream low-rank adapters over shared frozen linears,
plus zero-initialized cross-stream control links.

Linear maps use the row-vector convention ``y = x @ weight + bias`` with
``weight`` of shape ``(in_dim, out_dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionError, DomainError

STREAMS = ("rgb", "xyz")


class FrozenLinear(nn.Module):
    """A base linear map whose weights are buffers, never trained."""

    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator | None = None,
                 std: float | None = None, dtype=torch.float64):
        super().__init__()
        std = in_dim ** -0.5 if std is None else std
        w = torch.randn(in_dim, out_dim, generator=generator, dtype=dtype) * std
        self.register_buffer("weight", w)
        self.register_buffer("bias", torch.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def forward(self, x):
        return x @ self.weight + self.bias


class LoraAdapter(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, rank: int = 64, scale: float = 1.0,
                 generator: torch.Generator | None = None, std: float = 0.02, dtype=torch.float64):
        super().__init__()
        if not 1 <= rank <= min(in_dim, out_dim):
            raise DomainError(f"LoRA rank {rank} must lie in [1, min({in_dim}, {out_dim})]")
        self.rank = rank
        self.scale = scale
        self.down = nn.Parameter(torch.randn(in_dim, rank, generator=generator, dtype=dtype) * std)
        self.up = nn.Parameter(torch.zeros(rank, out_dim, dtype=dtype))

    def forward(self, x):
        return self.scale * ((x @ self.down) @ self.up)


def lora_forward(base: FrozenLinear, adapter: LoraAdapter | None, x: torch.Tensor,
                 name: str = "linear") -> torch.Tensor:
    """``base(x) + scale * x @ down @ up``; ``adapter=None`` gives the bare base map."""
    if x.shape[-1] != base.in_dim:
        raise DimensionError(f"{name}: input has {x.shape[-1]} features, base expects {base.in_dim}")
    if adapter is None:
        return base(x)
    if adapter.down.shape[0] != base.in_dim or adapter.up.shape[1] != base.out_dim:
        raise DimensionError(
            f"{name}: adapter maps {adapter.down.shape[0]}->{adapter.up.shape[1]}, "
            f"base maps {base.in_dim}->{base.out_dim}")
    return base(x) + adapter(x)


class DualLinear(nn.Module):
    """One frozen linear shared by both streams, each stream with its own adapter."""

    def __init__(self, in_dim, out_dim, rank, generator=None, base_std=None, lora_scale=1.0,
                 dtype=torch.float64):
        super().__init__()
        self.base = FrozenLinear(in_dim, out_dim, generator, base_std, dtype)
        self.lora = nn.ModuleDict({
            s: LoraAdapter(in_dim, out_dim, min(rank, in_dim, out_dim), lora_scale, generator, dtype=dtype)
            for s in STREAMS
        })

    def forward(self, x, stream: str | None, name: str = "linear"):
        adapter = None if stream is None else self.lora[stream]
        return lora_forward(self.base, adapter, x, name)


class ControlLink(nn.Module):
    """Zero-initialized affine map from one stream's features into the other's."""

    def __init__(self, dim: int, dtype=torch.float64):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(dim, dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x):
        return x @ self.weight + self.bias


def control_exchange(z_rgb: torch.Tensor, z_xyz: torch.Tensor,
                     links: tuple[ControlLink, ControlLink]) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-update both streams from their pre-exchange values.

    ``links`` is ``(rgb <- xyz, xyz <- rgb)``.
    """
    if z_rgb.shape != z_xyz.shape:
        raise DimensionError(f"control_exchange: stream shapes {tuple(z_rgb.shape)} and {tuple(z_xyz.shape)} differ")
    to_rgb, to_xyz = links
    dim = z_rgb.shape[-1]
    for link in links:
        if link.weight.shape != (dim, dim):
            raise DimensionError(f"control link is {tuple(link.weight.shape)}, tokens have dim {dim}")
    return z_rgb + to_rgb(z_xyz), z_xyz + to_xyz(z_rgb)


@dataclass(frozen=True)
class LinkPlan:
    layers: tuple[int, ...]  # 1-based layer indices
    n_layers: int

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise DomainError(f"linked layers must be strictly increasing: {self.layers}")
        if self.layers and not (1 <= self.layers[0] and self.layers[-1] <= self.n_layers):
            raise DomainError(f"linked layers {self.layers} fall outside [1, {self.n_layers}]")

    def __contains__(self, layer: int) -> bool:
        return layer in self.layers


def _round_half_up(x: float) -> int:
    return int(x + 0.5) if x >= 0 else -int(-x + 0.5)


def plan_links(n_layers: int, m: int) -> LinkPlan:
    """Spread ``m`` linked layers evenly over ``1..n_layers``."""
    if not 1 <= m <= n_layers:
        raise DomainError(f"need 1 <= m <= N, got m={m}, N={n_layers}")
    idx = []
    for k in range(1, m + 1):
        i = min(max(_round_half_up(k * n_layers / (m + 1)), 1), n_layers)
        if idx and i <= idx[-1]:
            i = idx[-1] + 1
        idx.append(i)
    return LinkPlan(tuple(idx), n_layers)

