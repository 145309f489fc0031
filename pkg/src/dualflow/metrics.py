"""Depth accuracy (Abs Rel, delta < 1.25) and trajectory accuracy (ATE, RPE-T, RPE-R)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, DomainError
from .postopt import CameraSet

REPORT_KEYS = ("abs_rel", "delta_125", "ate", "rpe_t", "rpe_r")
ALIGNMENT_LABEL = "per-sequence median scale"


@dataclass
class DepthReport:
    abs_rel: float
    delta_125: float
    scale: float = 1.0


@dataclass
class TrajReport:
    ate: float
    rpe_t: float
    rpe_r: float  # degrees


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def depth_metrics(pred, gt, align: bool = True) -> DepthReport:
    """``pred`` and ``gt`` are depth arrays (or ``DepthSet``) of equal shape.

    Pixels count as valid where ``gt > 0`` and both values are finite. With
    ``align`` the prediction is scaled by the median of ``gt / pred`` first.
    """
    pred = _np(getattr(pred, "depth", pred))
    gt = _np(getattr(gt, "depth", gt))
    if pred.shape != gt.shape:
        raise DimensionError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    valid = np.isfinite(pred) & np.isfinite(gt) & (gt > 0) & (pred > 0)
    if not valid.any():
        raise DomainError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    scale = float(np.median(g / p)) if align else 1.0
    p = p * scale
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    return DepthReport(abs_rel, float(np.mean(ratio < 1.25)), scale)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares similarity ``dst ~ s R src + t`` for ``(n, 3)`` point sets."""
    if np.array_equal(src, dst):
        # exact optimum; the SVD route would only add rounding noise
        return 1.0, np.eye(3), np.zeros(3)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def _rotation_angle_deg(R: np.ndarray) -> np.ndarray:
    # atan2 form stays accurate near zero where arccos of the trace loses half the digits
    c = (np.trace(R, axis1=-2, axis2=-1) - 1) / 2
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    return np.degrees(np.arctan2(np.linalg.norm(w, axis=-1) / 2, c))


def _poses(cams):
    """Camera-to-world rotations and centers from a CameraSet or ``(R_w2c, centers)``."""
    if isinstance(cams, CameraSet):
        R, o = _np(cams.rotations), _np(cams.center)
    else:
        R, o = (_np(a) for a in cams)
    return np.transpose(R, (0, 2, 1)), o


def _relative(R, o, i, j):
    """Relative poses ``T_i^{-1} T_j`` of camera-to-world poses ``(R, o)``."""
    R, o = np.ascontiguousarray(R), np.ascontiguousarray(o)
    Ri_t = np.ascontiguousarray(np.transpose(R[i], (0, 2, 1)))
    return Ri_t @ R[j], np.einsum("nij,nj->ni", Ri_t, o[j] - o[i])


def traj_metrics(pred, gt, delta: int = 1) -> TrajReport:
    """ATE after 7-DoF alignment; RPE over pairs ``(i, i + delta)`` of the aligned prediction."""
    Rp, op = _poses(pred)
    Rg, og = _poses(gt)
    if len(op) != len(og):
        raise DimensionError(f"frame counts differ: {len(op)} vs {len(og)}")
    if len(op) < 2:
        raise DomainError("trajectory metrics need at least two frames")
    if not 1 <= delta < len(op):
        raise DomainError(f"delta {delta} out of range for {len(op)} frames")
    s, R, t = umeyama(op, og)
    op_a = s * op @ R.T + t
    Rp_a = R @ Rp
    ate = float(np.sqrt(np.mean(np.sum((op_a - og) ** 2, axis=1))))

    i, j = np.arange(len(op) - delta), np.arange(delta, len(op))
    rel_R_p, rel_t_p = _relative(Rp_a, op_a, i, j)
    rel_R_g, rel_t_g = _relative(Rg, og, i, j)
    # error pose E = rel_g^{-1} rel_p
    err_R = np.transpose(rel_R_g, (0, 2, 1)) @ rel_R_p
    err_t = np.einsum("nji,nj->ni", rel_R_g, rel_t_p - rel_t_g)
    rpe_t = float(np.sqrt(np.mean(np.sum(err_t ** 2, axis=1))))
    rpe_r = float(np.sqrt(np.mean(_rotation_angle_deg(err_R) ** 2)))
    return TrajReport(ate, rpe_t, rpe_r)


def format_report(depth: DepthReport | None, traj: TrajReport | None) -> list[tuple[str, float]]:
    vals = {}
    if depth is not None:
        vals.update(abs_rel=depth.abs_rel, delta_125=depth.delta_125)
    if traj is not None:
        vals.update(ate=traj.ate, rpe_t=traj.rpe_t, rpe_r=traj.rpe_r)
    return [(k, vals[k]) for k in REPORT_KEYS if k in vals]
