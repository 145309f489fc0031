"""Flat ``key=value`` run configuration with typed defaults."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .io import format_kv, parse_kv


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # data
    frames: int = 9
    height: int = 32
    width: int = 32
    patch: int = 4
    clips: int = 8
    scenes: int = 1
    data: str = ""
    # backbone
    layers: int = 6
    token_dim: int = 64
    heads: int = 4
    latent_patch: int = 2
    links: int = 2
    lora_rank: int = 64
    lora_scale: float = 1.0
    base_seed: int = 0
    dtype: str = "float64"
    # training; t ~ uniform[0, 1]
    steps: int = 2000
    batch: int = 1
    lr: float = 1e-4
    task_ratios: str = "0.35,0.30,0.35"
    sparsity_min: float = 0.05
    sparsity_max: float = 0.5
    cond_dropout: float = 0.1
    ckpt_every: int = 0
    checkpoint: str = ""
    # sampling
    sample_steps: int = 50
    cfg_scale: float = 6.0
    sample_seed: int = 0
    observed: str = "all"
    input: str = ""
    scene: str = ""
    norm_center: str = ""
    norm_scale: float = 0.0
    # post-optimization
    alpha_point: float = 1.0
    alpha_smooth: float = 0.01
    post_iterations: int = 2000
    post_lr: float = 1e-2
    post_tol: float = 1e-7
    post_init: str = "resection"
    canonicalize: bool = True
    # evaluation
    rpe_delta: int = 1
    align: bool = True

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_text(self) -> str:
        return format_kv((k, _fmt(v)) for k, v in self.items())

    def write(self, path) -> None:
        Path(path).write_text("# resolved run configuration\n" + self.to_text())

    def updated(self, overrides: dict) -> "RunConfig":
        types = {f.name: type(f.default) for f in fields(self)}
        unknown = sorted(set(overrides) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {k: _coerce(k, v, types[k]) for k, v in overrides.items()}
        return dataclasses.replace(self, **coerced)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).updated(parse_kv(text))

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)

    @property
    def ratios(self) -> tuple[float, float, float]:
        r = tuple(float(x) for x in self.task_ratios.split(","))
        if len(r) != 3 or abs(sum(r) - 1) > 1e-9 or min(r) < 0:
            raise ConfigError(f"task_ratios must be three non-negative numbers summing to 1, got {self.task_ratios}")
        return r


# Full-scale reference setting; far too large to run here.
FULL_SCALE_PRESET = {
    "frames": 81, "height": 352, "width": 624, "lora_rank": 64, "links": 5,
    "layers": 40, "token_dim": 5120, "heads": 40, "steps": 5500, "lr": 1e-4,
    "sample_steps": 50, "cfg_scale": 6.0,
}


# Overrides used by the toy overfit check: one token per latent cell, a faster
# adapter learning rate and 32-bit training so 2000 steps fit in the time budget.
TOY_OVERFIT = {
    "latent_patch": 1, "lr": 1e-3, "lora_scale": 4.0, "dtype": "float32", "batch": 4,
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return typ(value)
    try:
        if typ is bool:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        return typ(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from None
