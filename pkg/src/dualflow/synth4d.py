"""Procedural scenes with exact camera/depth/pointmap consistency, used as a test oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError
from .postopt import CameraSet, DepthSet, axis_angle_to_rot, render_points, rot_to_quat

MAX_ROTATION_DEG = 30.0
DEPTH_RANGE = (0.5, 5.0)


@dataclass
class SceneTruth:
    cams: CameraSet
    depths: DepthSet
    pointmaps: torch.Tensor  # (3, F, H, W)
    seed: int

    @property
    def shape(self):
        return tuple(self.pointmaps.shape[1:])


def _depth_field(rng: np.random.Generator, n_frames: int, H: int, W: int) -> np.ndarray:
    """Base plane at 2.0 plus a few slowly drifting low-frequency sinusoids."""
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    y, x = y / max(H - 1, 1), x / max(W - 1, 1)
    n_waves = int(rng.integers(3, 9))
    kx = rng.uniform(-2.0, 2.0, n_waves) * np.pi
    ky = rng.uniform(-2.0, 2.0, n_waves) * np.pi
    amp = rng.uniform(0.05, 0.25, n_waves)
    phase = rng.uniform(0, 2 * np.pi, n_waves)
    drift = rng.uniform(-0.2, 0.2, n_waves)
    # tilt keeps the surface far from coplanar even where the bumps are flat
    tilt = rng.uniform(-0.3, 0.3, 2)
    depth = np.empty((n_frames, H, W))
    for i in range(n_frames):
        field = 2.0 + tilt[0] * (x - 0.5) + tilt[1] * (y - 0.5)
        for k in range(n_waves):
            field = field + amp[k] * np.sin(kx[k] * x + ky[k] * y + phase[k] + drift[k] * i)
        depth[i] = field
    return np.clip(depth, *DEPTH_RANGE)


def make_scene(seed: int, n_frames: int, height: int, width: int) -> SceneTruth:
    if n_frames < 1:
        raise DomainError(f"need at least one frame, got {n_frames}")
    if height < 4 or width < 4:
        raise DomainError(f"image must be at least 4x4, got {height}x{width}")
    rng = np.random.default_rng(seed)
    focal = float(rng.uniform(0.8, 1.2) * width)

    # centers: sinusoidal drift anchored so that frame 0 sits at the origin
    amp = rng.uniform(0.05, 0.3, 3)
    freq = rng.uniform(0.1, 0.5, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    i = np.arange(n_frames)[:, None]
    centers = amp * (np.sin(freq * i + phase) - np.sin(phase))

    axis = rng.normal(size=3)
    total = np.deg2rad(rng.uniform(5.0, MAX_ROTATION_DEG))
    ramp = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)
    quats = np.stack([rot_to_quat(axis_angle_to_rot(axis, total * r)) for r in ramp])
    quats[0] = (1.0, 0.0, 0.0, 0.0)

    cams = CameraSet(torch.full((n_frames,), focal, dtype=torch.float64),
                     torch.tensor(quats), torch.tensor(centers), height, width)
    depths = DepthSet.from_depth(torch.tensor(_depth_field(rng, n_frames, height, width)))
    # render from the stored log-depth so re-rendering reproduces the pointmaps exactly
    pts = render_points(cams, depths.depth)
    return SceneTruth(cams, depths, pts.permute(3, 0, 1, 2).contiguous(), seed)


def perturb(scene: SceneTruth, sigma: float, seed: int) -> torch.Tensor:
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return scene.pointmaps.clone()
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(scene.pointmaps.shape, generator=gen, dtype=scene.pointmaps.dtype)
    return scene.pointmaps + sigma * noise


def render_rgb(pointmaps: torch.Tensor) -> torch.Tensor:
    """Deterministic colors in [-1, 1] textured on world coordinates (3, F, H, W)."""
    x, y, z = pointmaps
    r = torch.sin(3.0 * x + 1.0 * z)
    g = torch.sin(3.0 * y - 2.0 * z + 0.5)
    b = torch.cos(2.0 * x + 2.0 * y + 1.5 * z)
    return torch.stack([r, g, b])
