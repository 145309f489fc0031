"""Gradients and the adaptive-moment optimizer shared by training and post-optimization.

Gradients come from torch autograd. The optimizer is a small hand-rolled Adam so that
its moment buffers live next to the parameters they belong to and serialize into the
checkpoint record format.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import torch

from .errors import DomainError, NumericError


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise DomainError(f"eps must be positive, got {self.eps}")


class ParamSet:
    """Named trainable tensors with their first and second moment buffers."""

    def __init__(self, params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]):
        items = params.items() if isinstance(params, Mapping) else params
        self.params: dict[str, torch.Tensor] = {}
        for name, p in items:
            if not p.requires_grad:
                p.requires_grad_(True)
            self.params[name] = p
        self.m = {k: torch.zeros_like(p, requires_grad=False) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p, requires_grad=False) for k, p in self.params.items()}
        self.t = 0

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_records(self, prefix: str = "") -> dict[str, torch.Tensor]:
        out = {}
        for k, p in self.params.items():
            out[f"{prefix}{k}"] = p.detach()
            out[f"{prefix}adam.m/{k}"] = self.m[k]
            out[f"{prefix}adam.v/{k}"] = self.v[k]
        out[f"{prefix}adam.t"] = torch.tensor([float(self.t)], dtype=torch.float64)
        return out

    @torch.no_grad()
    def load_records(self, records: Mapping[str, torch.Tensor], prefix: str = "", params_only: bool = False):
        for k, p in self.params.items():
            p.copy_(records[f"{prefix}{k}"].reshape(p.shape))
            if not params_only:
                self.m[k].copy_(records[f"{prefix}adam.m/{k}"].reshape(p.shape))
                self.v[k].copy_(records[f"{prefix}adam.v/{k}"].reshape(p.shape))
        if not params_only:
            self.t = int(records[f"{prefix}adam.t"].reshape(-1)[0])


def grad(loss_fn: Callable[[], torch.Tensor], params: ParamSet, detect_anomaly: bool = False):
    """Evaluate ``loss_fn`` and fill ``.grad`` on every parameter; returns the loss value.

    Parameters the loss does not touch get a zero gradient.
    """
    params.zero_grad()
    with torch.autograd.set_detect_anomaly(detect_anomaly):
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {float(loss.detach())}")
        try:
            loss.backward()
        except RuntimeError as exc:
            raise NumericError(str(exc)) from exc
    for p in params.params.values():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return float(loss.detach())


@torch.no_grad()
def step(params: ParamSet, cfg: OptimConfig, t: int | None = None) -> None:
    """One bias-corrected Adam update in place."""
    t = params.t + 1 if t is None else t
    if t < 1:
        raise DomainError(f"step count must be >= 1, got {t}")
    bc1 = 1 - cfg.beta1 ** t
    bc2 = 1 - cfg.beta2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            raise DomainError(f"no gradient for {name}")
        m, v = params.m[name], params.v[name]
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps)
        if not torch.isfinite(update).all():
            raise NumericError(f"non-finite update for {name} at step {t}")
        p.sub_(update)
    params.t = t


@torch.no_grad()
def finite_difference(loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5,
                      indices: Iterable[int] | None = None) -> torch.Tensor:
    """Central differences of ``loss_fn`` w.r.t. the entries of ``tensor`` (perturbed in place)."""
    flat = tensor.view(-1)
    out = torch.zeros_like(flat)
    for i in range(flat.numel()) if indices is None else indices:
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.view_as(tensor)


def gradient_check(loss_fn: Callable[[], torch.Tensor], params: ParamSet, h: float = 1e-5,
                   rtol: float = 1e-4, atol: float = 1e-9) -> dict[str, float]:
    """Compare autograd against central differences for every parameter.

    Returns, per parameter, the relative error ``||g_ad - g_fd|| / max(||g_fd||, atol)``.
    """
    grad(loss_fn, params)
    analytic = {k: p.grad.detach().clone() for k, p in params}
    report = {}
    for name, p in params:
        fd = finite_difference(loss_fn, p.data, h)
        denom = max(float(fd.norm()), float(analytic[name].norm()), atol)
        report[name] = float((analytic[name] - fd).norm()) / denom
    return report
