"""Unified masked conditioning: one zero-filled conditioning video plus a frame mask
covers single-image, sparse-frame and full-video inputs."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .errors import DimensionError, DomainError
from .grids import encode

TASK_RATIOS = (0.35, 0.30, 0.35)
TRAIN_SPARSITY_RANGE = (0.05, 0.5)


class TaskKind(enum.Enum):
    SINGLE_IMAGE = "single_image"
    SPARSE_FRAME = "sparse_frame"
    FULL_VIDEO = "full_video"


@dataclass(frozen=True)
class ConditionPack:
    x_c: torch.Tensor  # 3 x F x H x W, zero at unobserved frames
    m_c: torch.Tensor  # 1 x F x H x W, frame-constant 0/1
    observed: tuple[int, ...]

    @property
    def task(self) -> TaskKind:
        n_frames = self.x_c.shape[1]
        if len(self.observed) == n_frames:
            return TaskKind.FULL_VIDEO
        if self.observed == (0,):
            return TaskKind.SINGLE_IMAGE
        return TaskKind.SPARSE_FRAME


def build_condition(frames: torch.Tensor, observed: Iterable[int]) -> ConditionPack:
    if frames.dim() != 4:
        raise DimensionError(f"frames must be (C, F, H, W), got {tuple(frames.shape)}")
    n_frames = frames.shape[1]
    obs = tuple(sorted(set(int(i) for i in observed)))
    if not obs:
        raise DomainError("observed frame set is empty")
    bad = [i for i in obs if not 0 <= i < n_frames]
    if bad:
        raise DomainError(f"observed indices {bad} out of range for {n_frames} frames")
    keep = torch.zeros(n_frames, dtype=torch.bool)
    keep[list(obs)] = True
    x_c = torch.where(keep.view(1, -1, 1, 1), frames, torch.zeros((), dtype=frames.dtype))
    m_c = keep.to(frames.dtype).view(1, -1, 1, 1).expand(1, *frames.shape[1:]).clone()
    return ConditionPack(x_c, m_c, obs)


def mask_to_latent(m_c: torch.Tensor, patch: int = 4) -> torch.Tensor:
    if m_c.dim() != 4 or m_c.shape[0] != 1:
        raise DimensionError(f"mask must be (1, F, H, W), got {tuple(m_c.shape)}")
    return encode(m_c, patch)


def condition_latents(pack: ConditionPack, patch: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    return encode(pack.x_c, patch), mask_to_latent(pack.m_c, patch)


def sample_task(rng: np.random.Generator, ratios=TASK_RATIOS) -> TaskKind:
    kinds = list(TaskKind)
    return kinds[rng.choice(len(kinds), p=np.asarray(ratios, dtype=float))]


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def sparse_schedule(n_frames: int, sparsity: float) -> tuple[int, ...]:
    """First and last frame plus evenly spaced frames in between, about ``sparsity * F`` in total."""
    if n_frames < 2:
        raise DomainError(f"sparse schedule needs at least 2 frames, got {n_frames}")
    if not 0 < sparsity <= 1:
        raise DomainError(f"sparsity must lie in (0, 1], got {sparsity}")
    n = max(2, round_half_away(sparsity * n_frames))
    n = min(n, n_frames)
    return tuple(sorted({round_half_away(k * (n_frames - 1) / (n - 1)) for k in range(n)}))


def observed_for_task(task: TaskKind, n_frames: int, rng: np.random.Generator,
                      sparsity_range=TRAIN_SPARSITY_RANGE) -> tuple[int, ...]:
    if task is TaskKind.SINGLE_IMAGE or n_frames == 1:
        return (0,)
    if task is TaskKind.FULL_VIDEO:
        return tuple(range(n_frames))
    s = rng.uniform(*sparsity_range)
    return sparse_schedule(n_frames, s)


def parse_observed(text: str, n_frames: int) -> tuple[int, ...]:
    """Observed frames from ``"all"``, a comma list like ``"0,4,8"`` or ``"s=0.25"``."""
    text = text.strip()
    if text == "all":
        return tuple(range(n_frames))
    if text.startswith("s="):
        try:
            s = float(text[2:])
        except ValueError:
            raise DomainError(f"cannot parse sparsity in {text!r}") from None
        return sparse_schedule(n_frames, s)
    try:
        obs = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise DomainError(f"cannot parse observed frames {text!r}") from None
    if not obs:
        raise DomainError("observed frame set is empty")
    bad = [i for i in obs if not 0 <= i < n_frames]
    if bad:
        raise DomainError(f"observed indices {bad} out of range for {n_frames} frames")
    return tuple(sorted(set(obs)))
