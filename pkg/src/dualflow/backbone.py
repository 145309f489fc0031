"""Toy diffusion transformer running an RGB stream and an XYZ stream over shared frozen
weights, each stream with its own adapters, coupled only through control links."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .dlc import (ControlLink, DualLinear, FrozenLinear, LinkPlan, LoraAdapter, control_exchange,
                  lora_forward, plan_links)
from .errors import DimensionError, DomainError, NumericError
from .grids import decode, encode

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class BackboneConfig:
    layers: int = 6
    token_dim: int = 64
    heads: int = 4
    latent_patch: int = 2
    links: int = 2
    lora_rank: int = 64
    lora_scale: float = 1.0
    latent_channels: int = 48  # c, per modality
    mask_channels: int = 16  # c_m
    mlp_ratio: int = 4
    seed: int = 0  # frozen base weights and adapter down-factors
    dtype: str = "float64"

    def __post_init__(self):
        if self.layers < 1:
            raise DomainError(f"need at least one layer, got {self.layers}")
        if self.token_dim % self.heads:
            raise DomainError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")

    @property
    def rgb_in_channels(self) -> int:
        return 2 * self.latent_channels + self.mask_channels

    @property
    def xyz_in_channels(self) -> int:
        return self.latent_channels

    @property
    def link_plan(self) -> LinkPlan:
        if self.links == 0:
            return LinkPlan((), self.layers)
        return plan_links(self.layers, self.links)

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def assemble_input(z_rgb_t: torch.Tensor, z_c: torch.Tensor, m_latent: torch.Tensor) -> torch.Tensor:
    """Channel concat ``(noisy rgb, conditioning, mask)``; only the RGB stream sees this."""
    grids = (z_rgb_t, z_c, m_latent)
    if any(g.dim() != 4 for g in grids):
        raise DimensionError("assemble_input expects (c, f, h, w) grids")
    if len({tuple(g.shape[1:]) for g in grids}) != 1:
        raise DimensionError(f"(f, h, w) differ: {[tuple(g.shape[1:]) for g in grids]}")
    return torch.cat(grids, dim=0)


def patchify(latent: torch.Tensor, p: int) -> tuple[torch.Tensor, tuple[int, int, int]]:
    x = encode(latent, p)  # (c*p*p, f, h', w')
    origin = tuple(x.shape[1:])
    return x.flatten(1).T.contiguous(), origin


def unpatchify(tokens: torch.Tensor, origin: tuple[int, int, int], p: int) -> torch.Tensor:
    x = tokens.T.reshape(tokens.shape[1], *origin)
    return decode(x, p)


def position_embedding(origin, dim: int, dtype) -> torch.Tensor:
    """Fixed sinusoidal code of the (frame, row, column) index, zero-padded to ``dim``."""
    n_freq = dim // 6
    freqs = torch.exp(-math.log(100.0) * torch.arange(n_freq, dtype=dtype) / max(n_freq, 1))
    grids = torch.meshgrid(*[torch.arange(n, dtype=dtype) for n in origin], indexing="ij")
    parts = []
    for g in grids:
        ang = g.reshape(-1, 1) * freqs
        parts += [torch.sin(ang), torch.cos(ang)]
    pe = torch.cat(parts, dim=1)
    return F.pad(pe, (0, dim - pe.shape[1]))


def timestep_embedding(t: float, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    ang = 1000.0 * float(t) * freqs
    return F.pad(torch.cat([torch.cos(ang), torch.sin(ang)]), (0, dim - 2 * half))


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class DiTLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig, gen: torch.Generator):
        super().__init__()
        d, r, dt = cfg.token_dim, cfg.lora_rank, cfg.torch_dtype
        lin = lambda i, o, std=None: DualLinear(i, o, r, gen, std, cfg.lora_scale, dt)
        self.heads = cfg.heads
        self.mod = lin(d, 6 * d, 0.1 * d ** -0.5)
        self.qkv = lin(d, 3 * d)
        # residual-branch outputs start small so the frozen stack is close to identity
        res = 1.0 / math.sqrt(2 * cfg.layers)
        self.proj = lin(d, d, res * d ** -0.5)
        self.fc1 = lin(d, cfg.mlp_ratio * d)
        self.fc2 = lin(cfg.mlp_ratio * d, d, res * (cfg.mlp_ratio * d) ** -0.5)

    def attention(self, x, stream):
        n, d = x.shape
        q, k, v = self.qkv(x, stream, "qkv").split(d, dim=1)
        hd = d // self.heads
        q, k, v = (a.reshape(n, self.heads, hd).transpose(0, 1) for a in (q, k, v))
        w = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(hd), dim=-1)
        out = (w @ v).transpose(0, 1).reshape(n, d)
        return self.proj(out, stream, "proj")

    def forward(self, x, temb, stream):
        d = x.shape[1]
        sh1, sc1, g1, sh2, sc2, g2 = self.mod(temb, stream, "mod").split(d)
        h = _modulate(F.layer_norm(x, (d,)), sh1, sc1)
        x = x + (1 + g1) * self.attention(h, stream)
        h = _modulate(F.layer_norm(x, (d,)), sh2, sc2)
        h = self.fc2(F.gelu(self.fc1(h, stream, "fc1")), stream, "fc2")
        return x + (1 + g2) * h


class StreamProjection(nn.Module):
    """A frozen linear used by a single stream, with that stream's adapter."""

    def __init__(self, in_dim, out_dim, rank, gen, scale, dtype):
        super().__init__()
        self.base = FrozenLinear(in_dim, out_dim, gen, dtype=dtype)
        self.lora = LoraAdapter(in_dim, out_dim, min(rank, in_dim, out_dim), scale, gen, dtype=dtype)

    def forward(self, x, adapted: bool = True):
        return lora_forward(self.base, self.lora if adapted else None, x, "projection")


class DualBranchDiT(nn.Module):
    """Two token streams through one frozen stack.

    Trainable parameters are the adapters (``*.lora.*``) and control links
    (``links.*``); everything else is a buffer.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d, r, p, dt = cfg.token_dim, cfg.lora_rank, cfg.latent_patch, cfg.torch_dtype
        self.in_rgb = StreamProjection(cfg.rgb_in_channels * p * p, d, r, gen, cfg.lora_scale, dt)
        self.in_xyz = StreamProjection(cfg.xyz_in_channels * p * p, d, r, gen, cfg.lora_scale, dt)
        self.time1 = DualLinear(d, d, r, gen, None, cfg.lora_scale, dt)
        self.time2 = DualLinear(d, d, r, gen, None, cfg.lora_scale, dt)
        self.blocks = nn.ModuleList(DiTLayer(cfg, gen) for _ in range(cfg.layers))
        self.mod_out = DualLinear(d, 2 * d, r, gen, 0.1 * d ** -0.5, cfg.lora_scale, dt)
        self.out_rgb = StreamProjection(d, cfg.latent_channels * p * p, r, gen, cfg.lora_scale, dt)
        self.out_xyz = StreamProjection(d, cfg.latent_channels * p * p, r, gen, cfg.lora_scale, dt)
        self.plan = cfg.link_plan
        self.links = nn.ModuleDict({
            str(l): nn.ModuleList([ControlLink(d, dt), ControlLink(d, dt)]) for l in self.plan.layers
        })

    def _embed_time(self, t, stream):
        temb = timestep_embedding(t, self.cfg.token_dim, self.cfg.torch_dtype)
        return self.time2(F.silu(self.time1(temb, stream, "time1")), stream, "time2")

    def _head(self, x, temb, proj, stream):
        d = x.shape[1]
        shift, scale = self.mod_out(temb, stream, "mod_out").split(d)
        return proj(_modulate(F.layer_norm(x, (d,)), shift, scale), adapted=stream is not None)

    def _check_inputs(self, z_input, z_xyz_t, t):
        c = self.cfg
        if z_input.shape[0] != c.rgb_in_channels:
            raise DimensionError(f"rgb input has {z_input.shape[0]} channels, expected {c.rgb_in_channels}")
        if z_xyz_t.shape[0] != c.xyz_in_channels:
            raise DimensionError(f"xyz input has {z_xyz_t.shape[0]} channels, expected {c.xyz_in_channels}")
        if z_input.shape[1:] != z_xyz_t.shape[1:]:
            raise DimensionError(f"stream grids differ: {tuple(z_input.shape)} vs {tuple(z_xyz_t.shape)}")
        if not 0.0 <= float(t) <= 1.0:
            raise DomainError(f"t must lie in [0, 1], got {t}")

    def forward(self, z_input: torch.Tensor, z_xyz_t: torch.Tensor, t: float,
                use_links: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_inputs(z_input, z_xyz_t, t)
        p = self.cfg.latent_patch
        tok_rgb, origin = patchify(z_input, p)
        tok_xyz, _ = patchify(z_xyz_t, p)
        pe = position_embedding(origin, self.cfg.token_dim, tok_rgb.dtype)
        x_rgb = self.in_rgb(tok_rgb) + pe
        x_xyz = self.in_xyz(tok_xyz) + pe
        te_rgb, te_xyz = self._embed_time(t, "rgb"), self._embed_time(t, "xyz")
        for i, block in enumerate(self.blocks, start=1):
            x_rgb = block(x_rgb, te_rgb, "rgb")
            x_xyz = block(x_xyz, te_xyz, "xyz")
            if use_links and i in self.plan:
                x_rgb, x_xyz = control_exchange(x_rgb, x_xyz, tuple(self.links[str(i)]))
            if not (torch.isfinite(x_rgb).all() and torch.isfinite(x_xyz).all()):
                raise NumericError(f"non-finite activations after layer {i}")
        v_rgb = unpatchify(self._head(x_rgb, te_rgb, self.out_rgb, "rgb"), origin, p)
        v_xyz = unpatchify(self._head(x_xyz, te_xyz, self.out_xyz, "xyz"), origin, p)
        return v_rgb, v_xyz

    def base_forward(self, z_input: torch.Tensor, t: float) -> torch.Tensor:
        """The frozen model alone on the RGB stream: no adapters, no links."""
        p = self.cfg.latent_patch
        tok, origin = patchify(z_input, p)
        x = self.in_rgb(tok, adapted=False) + position_embedding(origin, self.cfg.token_dim, tok.dtype)
        temb = self._embed_time(t, None)
        for block in self.blocks:
            x = block(x, temb, None)
        return unpatchify(self._head(x, temb, self.out_rgb, None), origin, p)

    def velocity(self, z_rgb_t, z_xyz_t, cond, t):
        """Adapter for :func:`dualflow.flowmatch.sample`; ``cond`` is ``(z_c, m_latent)``."""
        return self(assemble_input(z_rgb_t, *cond), z_xyz_t, t)
