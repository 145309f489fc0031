"""Conditioning -> sampling -> decoding -> post-optimization, and the file outputs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import DualBranchDiT
from .errors import DimensionError
from .flowmatch import SamplerConfig, sample
from .grids import NormStats, decode, denormalize_pointmaps
from .io import save_tensor, write_ply, write_tum
from .postopt import CameraSet, PostOptConfig, PostOptResult, optimize, rot_to_quat
from .umc import ConditionPack, build_condition, condition_latents


@dataclass
class Generation:
    rgb: torch.Tensor  # (3, F, H, W)
    pointmaps: torch.Tensor  # (3, F, H, W), scene units
    pack: ConditionPack
    recon: PostOptResult | None = None


def generate(model: DualBranchDiT, frames: torch.Tensor, observed, sampler: SamplerConfig, patch: int = 4,
             stats: NormStats | None = None) -> Generation:
    """Sample RGB and pointmaps for ``frames`` given the observed frame set.

    ``frames`` must already span the full clip length; unobserved frames are
    zeroed by the conditioning step, so their content is irrelevant.
    """
    if frames.dim() != 4 or frames.shape[0] != 3:
        raise DimensionError(f"frames must be (3, F, H, W), got {tuple(frames.shape)}")
    dtype = model.cfg.torch_dtype
    pack = build_condition(frames.to(dtype), observed)
    z_c, m_lat = condition_latents(pack, patch)
    z_rgb, z_xyz = sample(model.velocity, (z_c, m_lat), sampler, z_c.shape, dtype=dtype)
    rgb = decode(z_rgb, patch).to(torch.float64)
    pm = decode(z_xyz, patch).to(torch.float64)
    if stats is not None:
        pm = denormalize_pointmaps(pm, stats)
    return Generation(rgb, pm, pack)


def reconstruct(gen: Generation, cfg: PostOptConfig) -> Generation:
    gen.recon = optimize(gen.pointmaps, cfg)
    return gen


def camera_to_world_quats(cams: CameraSet) -> np.ndarray:
    """TUM-order ``(x, y, z, w)`` quaternions of the camera-to-world rotations."""
    R_c2w = np.transpose(cams.rotations.detach().numpy(), (0, 2, 1))
    q = np.stack([rot_to_quat(R) for R in R_c2w])
    return q[:, [1, 2, 3, 0]]


def write_scene_files(out_dir, cams: CameraSet, depth: torch.Tensor, pointmaps: torch.Tensor | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if pointmaps is not None:
        save_tensor(out / "pointmaps.o4d", pointmaps)
    save_tensor(out / "depths.o4d", depth.unsqueeze(0))
    write_tum(out / "trajectory.txt", cams.center.detach().numpy(), camera_to_world_quats(cams))


def write_generation(out_dir, gen: Generation) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "rgb.o4d", gen.rgb)
    if gen.recon is None:
        save_tensor(out / "pointmaps.o4d", gen.pointmaps)
        return
    write_scene_files(out, gen.recon.cams, gen.recon.depths.depth, gen.pointmaps)
    pts = gen.recon.points().reshape(-1, 3).numpy()
    colors = (gen.rgb.permute(1, 2, 3, 0).reshape(-1, 3).clamp(-1, 1).numpy() + 1) * 127.5
    write_ply(out / "points.ply", pts, colors)
