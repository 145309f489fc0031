"""Recover per-frame focal, rotation, camera center and depth from a pointmap sequence.

A pixel ``(u, v)`` of frame ``i`` maps to the world point
``R_i^T (D_uv K_i^{-1} (u, v, 1)^T) + o_i`` with ``R_i`` world-to-camera,
``K_i`` a single-focal pinhole centred on the image, and ``u`` the column index.
Frame 0 is the gauge: ``R_0 = I`` and ``o_0 = 0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import DimensionError, DomainError, NumericError
from .optim import OptimConfig, ParamSet, grad, step

log = logging.getLogger(__name__)

DEGENERATE_EXTENT = 1e-9


# -- rotations ---------------------------------------------------------------

def quat_to_rot(q: torch.Tensor) -> torch.Tensor:
    """``(..., 4)`` quaternions ``(w, x, y, z)`` to rotation matrices; normalizes first."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def rot_to_quat(R) -> np.ndarray:
    """Rotation matrix to ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_to_rot(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is defined as zero."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


# -- parameter containers ----------------------------------------------------

@dataclass
class CameraSet:
    focal: torch.Tensor  # (F,) pixels
    quat: torch.Tensor  # (F, 4) world-to-camera, (w, x, y, z)
    center: torch.Tensor  # (F, 3)
    height: int
    width: int

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2

    @property
    def n_frames(self) -> int:
        return self.focal.shape[0]

    @property
    def rotations(self) -> torch.Tensor:
        return quat_to_rot(self.quat)

    def detach(self) -> "CameraSet":
        return replace(self, focal=self.focal.detach().clone(), quat=self.quat.detach().clone(),
                       center=self.center.detach().clone())

    @classmethod
    def identity(cls, n_frames, height, width, focal=1.0, dtype=torch.float64):
        q = torch.zeros(n_frames, 4, dtype=dtype)
        q[:, 0] = 1
        return cls(torch.full((n_frames,), float(focal), dtype=dtype), q,
                   torch.zeros(n_frames, 3, dtype=dtype), height, width)


@dataclass
class DepthSet:
    log_depth: torch.Tensor  # (F, H, W)

    @property
    def depth(self) -> torch.Tensor:
        return torch.exp(self.log_depth)

    @classmethod
    def from_depth(cls, depth: torch.Tensor) -> "DepthSet":
        if (depth <= 0).any():
            raise DomainError("depths must be positive")
        return cls(torch.log(depth))


@dataclass
class PostOptConfig:
    alpha_point: float = 1.0
    alpha_smooth: float = 0.01
    iterations: int = 2000
    lr: float = 1e-2
    tol: float = 1e-7
    init: str = "resection"  # or "naive"
    canonicalize: bool = True

    def __post_init__(self):
        if self.alpha_point < 0 or self.alpha_smooth < 0:
            raise DomainError("loss weights must be non-negative")
        if self.iterations < 1:
            raise DomainError(f"iterations must be >= 1, got {self.iterations}")
        if self.init not in ("resection", "naive"):
            raise DomainError(f"unknown init {self.init!r}")


@dataclass
class PostOptResult:
    cams: CameraSet
    depths: DepthSet
    trace: list[float] = field(default_factory=list)
    best_iteration: int = 0
    degenerate: bool = False

    def points(self) -> torch.Tensor:
        return render_points(self.cams, self.depths.depth)


# -- forward model -----------------------------------------------------------

def _pixel_grid(height, width, dtype):
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij")
    return u, v


def project_point(focal, quat, center, depth, u, v, cx=0.0, cy=0.0) -> torch.Tensor:
    """World point of pixel ``(u, v)`` at depth ``depth`` for one camera."""
    depth = torch.as_tensor(depth, dtype=torch.float64)
    if (depth <= 0).any():
        raise DomainError(f"depth must be positive, got {depth}")
    focal, quat, center = (torch.as_tensor(a, dtype=torch.float64) for a in (focal, quat, center))
    ray = torch.stack([(torch.as_tensor(u, dtype=torch.float64) - cx) / focal,
                       (torch.as_tensor(v, dtype=torch.float64) - cy) / focal,
                       torch.ones_like(depth)], dim=-1)
    return (depth[..., None] * ray) @ quat_to_rot(quat) + center


def unproject_point(focal, quat, center, point, cx=0.0, cy=0.0):
    """Analytic inverse of :func:`project_point`: world point to ``(u, v, depth)``."""
    point = torch.as_tensor(point, dtype=torch.float64)
    R = quat_to_rot(torch.as_tensor(quat, dtype=torch.float64))
    cam = (point - torch.as_tensor(center, dtype=torch.float64)) @ R.T
    depth = cam[..., 2]
    return focal * cam[..., 0] / depth + cx, focal * cam[..., 1] / depth + cy, depth


def render_points(cams: CameraSet, depth: torch.Tensor) -> torch.Tensor:
    """World points ``(F, H, W, 3)`` for every pixel of every frame."""
    n, H, W = depth.shape
    if (n, H, W) != (cams.n_frames, cams.height, cams.width):
        raise DimensionError(f"depth grid {tuple(depth.shape)} does not match cameras "
                             f"({cams.n_frames}, {cams.height}, {cams.width})")
    u, v = _pixel_grid(H, W, depth.dtype)
    f = cams.focal.view(-1, 1, 1)
    ray = torch.stack([(u - cams.cx) / f, (v - cams.cy) / f, torch.ones_like(depth)], dim=-1)
    cam_pts = depth[..., None] * ray
    # row vectors: x @ R == (R^T x^T)^T
    return torch.einsum("fhwj,fjk->fhwk", cam_pts, cams.rotations) + cams.center.view(-1, 1, 1, 3)


def _as_points(observed: torch.Tensor) -> torch.Tensor:
    """Pointmap video ``(3, F, H, W)`` to ``(F, H, W, 3)``."""
    if observed.dim() != 4 or observed.shape[0] != 3:
        raise DimensionError(f"pointmaps must be (3, F, H, W), got {tuple(observed.shape)}")
    return observed.permute(1, 2, 3, 0)


def loss_pointmap(cams: CameraSet, depths: DepthSet, observed: torch.Tensor) -> torch.Tensor:
    pts = render_points(cams, depths.depth)
    obs = _as_points(observed).to(pts.dtype)
    if obs.shape != pts.shape:
        raise DimensionError(f"observed {tuple(obs.shape)} vs parameters {tuple(pts.shape)}")
    return (pts - obs).abs().sum()


def loss_smooth(cams: CameraSet) -> torch.Tensor:
    if cams.n_frames < 2:
        return torch.zeros((), dtype=cams.center.dtype)
    R = cams.rotations
    rel = R[:-1].transpose(1, 2) @ R[1:] - torch.eye(3, dtype=R.dtype)
    rot_term = safe_norm(rel.reshape(-1, 9))
    trans_term = safe_norm(cams.center[1:] - cams.center[:-1])
    return (rot_term + trans_term).sum()


def loss_all(cams, depths, observed, cfg: PostOptConfig) -> torch.Tensor:
    return cfg.alpha_point * loss_pointmap(cams, depths, observed) + cfg.alpha_smooth * loss_smooth(cams)


# -- initialization ----------------------------------------------------------

def resect(points: np.ndarray, height: int, width: int):
    """Linear camera resection for a single-focal, centred pinhole.

    ``points`` is ``(H, W, 3)``. Returns ``(focal, R, center)`` or ``None`` when the
    points are too degenerate (e.g. coplanar) for the 11-parameter linear solve.
    """
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    uc = (u - (width - 1) / 2).ravel()
    vc = (v - (height - 1) / 2).ravel()
    X = points.reshape(-1, 3)
    ok = np.isfinite(X).all(axis=1)
    X, uc, vc = X[ok], uc[ok], vc[ok]
    if len(X) < 6:
        return None
    mean = X.mean(axis=0)
    sx = np.sqrt(3) / max(np.sqrt(((X - mean) ** 2).sum(axis=1)).mean(), 1e-300)
    su = np.sqrt(2) / max(np.sqrt(uc ** 2 + vc ** 2).mean(), 1e-300)
    Xn = np.hstack([(X - mean) * sx, np.ones((len(X), 1))])
    un, vn = uc * su, vc * su
    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -un[:, None] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -vn[:, None] * Xn
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] < 1e-10 * s[0]:
        return None
    Pn = vt[-1].reshape(3, 4)
    T_x = np.eye(4)
    T_x[:3, :3] *= sx
    T_x[:3, 3] = -mean * sx
    P = np.diag([1 / su, 1 / su, 1.0]) @ Pn @ T_x
    M = P[:, :3]
    det = np.linalg.det(M)
    if not np.isfinite(det) or abs(det) < 1e-300:
        return None
    P = P / (np.sign(det) * np.linalg.norm(M[2]))
    M = P[:, :3]
    focal = (np.linalg.norm(M[0]) + np.linalg.norm(M[1])) / 2
    R = np.stack([M[0] / focal, M[1] / focal, M[2]])
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    center = -np.linalg.solve(M, P[:, 3])
    if not (np.isfinite(focal) and focal > 0 and np.isfinite(center).all()):
        return None
    return focal, R, center


def _focal_identity_rot(points: np.ndarray, center: np.ndarray, height: int, width: int) -> float:
    """Least-squares focal assuming ``R = I``: fit ``u - cx ~ f x / z``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    rel = points - center
    z = np.where(np.abs(rel[..., 2]) > 1e-12, rel[..., 2], 1e-12)
    a = np.concatenate([(rel[..., 0] / z).ravel(), (rel[..., 1] / z).ravel()])
    b = np.concatenate([(u - (width - 1) / 2).ravel(), (v - (height - 1) / 2).ravel()])
    denom = float(a @ a)
    f = float(a @ b) / denom if denom > 0 else float(max(height, width))
    return f if np.isfinite(f) and f > 0 else float(max(height, width))


def _naive_init(pts: np.ndarray):
    n, H, W, _ = pts.shape
    centroids = pts.reshape(n, -1, 3).mean(axis=1)
    centers = centroids - centroids[0]
    rots = np.repeat(np.eye(3)[None], n, axis=0)
    focals = np.array([_focal_identity_rot(pts[i], centers[i], H, W) for i in range(n)])
    depth = np.maximum(np.linalg.norm(pts, axis=-1), 1e-6)
    return focals, rots, centers, depth


def _resection_init(pts: np.ndarray):
    n, H, W, _ = pts.shape
    focals, rots, centers = np.zeros(n), np.zeros((n, 3, 3)), np.zeros((n, 3))
    for i in range(n):
        sol = resect(pts[i], H, W) if i > 0 else None
        if sol is None:
            c = np.zeros(3) if i == 0 else pts[i].reshape(-1, 3).mean(0) - pts[0].reshape(-1, 3).mean(0)
            sol = (_focal_identity_rot(pts[i], c, H, W), np.eye(3), c)
            if i == 0:
                full = resect(pts[0], H, W)
                if full is not None:
                    sol = (full[0], np.eye(3), c)
        focals[i], rots[i], centers[i] = sol
    cam = np.einsum("fij,fhwj->fhwi", rots, pts - centers[:, None, None, :])
    depth = np.maximum(cam[..., 2], 1e-6)
    return focals, rots, centers, depth


def canonical_frame(pts: np.ndarray):
    """Rigid motion ``(R0, o0)`` putting frame 0's camera at the origin looking down +z."""
    n, H, W, _ = pts.shape
    sol = resect(pts[0], H, W)
    if sol is None:
        return np.eye(3), np.zeros(3)
    return sol[1], sol[2]


# -- optimization ------------------------------------------------------------

def optimize(observed: torch.Tensor, cfg: PostOptConfig | None = None) -> PostOptResult:
    """Minimize ``alpha_point * L_p + alpha_smooth * L_s`` with Adam.

    ``observed`` is a ``(3, F, H, W)`` pointmap video. With ``cfg.canonicalize`` the
    input is first re-expressed in frame 0's camera coordinates (estimated by
    resection) and the result is mapped back, so inputs need not follow the
    first-frame convention. Returns the best iterate seen.
    """
    cfg = cfg or PostOptConfig()
    obs = observed.detach().to(torch.float64)
    pts = _as_points(obs).numpy()
    if not np.isfinite(pts).all():
        raise NumericError("observed pointmaps contain non-finite values")
    n, H, W, _ = pts.shape

    extent = float((pts.reshape(-1, 3).max(0) - pts.reshape(-1, 3).min(0)).max())
    if extent < DEGENERATE_EXTENT:
        log.warning("degenerate pointmaps (extent %.3g); returning the initialization", extent)
        cams = CameraSet.identity(n, H, W, focal=float(max(H, W)))
        return PostOptResult(cams, DepthSet(torch.zeros(n, H, W, dtype=torch.float64)), degenerate=True)

    R0, o0 = canonical_frame(pts) if cfg.canonicalize else (np.eye(3), np.zeros(3))
    pts_c = (pts - o0) @ R0.T
    focals, rots, centers, depth = (_resection_init if cfg.init == "resection" else _naive_init)(pts_c)
    target = torch.from_numpy(np.ascontiguousarray(pts_c.transpose(3, 0, 1, 2)))

    log_f = torch.tensor(np.log(focals))
    q_free = torch.tensor(np.array([rot_to_quat(R) for R in rots[1:]])).reshape(n - 1, 4)
    o_free = torch.tensor(centers[1:]).reshape(n - 1, 3)
    log_d = torch.tensor(np.log(depth))
    params = ParamSet({"log_focal": log_f, "quat": q_free, "center": o_free, "log_depth": log_d})
    q0 = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    o_0 = torch.zeros(1, 3, dtype=torch.float64)

    def assemble():
        cams = CameraSet(torch.exp(params.params["log_focal"]),
                         torch.cat([q0, params.params["quat"]]),
                         torch.cat([o_0, params.params["center"]]), H, W)
        return cams, DepthSet(params.params["log_depth"])

    def objective():
        cams, depths = assemble()
        return loss_all(cams, depths, target, cfg)

    ocfg = OptimConfig(lr=cfg.lr)
    trace: list[float] = []
    best, best_it, best_state = float("inf"), 0, None
    for it in range(cfg.iterations + 1):
        try:
            value = grad(objective, params)
        except NumericError as exc:
            raise NumericError(f"post-optimization diverged at iteration {it}: {exc}") from exc
        trace.append(value)
        if value < best:
            best, best_it = value, it
            best_state = {k: p.detach().clone() for k, p in params}
        if value == 0.0 or it == cfg.iterations:
            break
        if it > 0 and abs(trace[-2] - value) <= cfg.tol * abs(trace[-2]):
            break
        step(params, ocfg)
        with torch.no_grad():
            q = params.params["quat"]
            q /= q.norm(dim=-1, keepdim=True)

    with torch.no_grad():
        for k, p in params:
            p.copy_(best_state[k])
    cams, depths = assemble()
    cams = cams.detach()
    # back from frame-0 coordinates: R_i <- R_i R0, o_i <- R0^T o_i + o0
    R0_t, o0_t = torch.from_numpy(R0), torch.from_numpy(o0)
    R_world = cams.rotations @ R0_t
    cams.quat = torch.tensor(np.stack([rot_to_quat(R) for R in R_world.numpy()]))
    cams.center = cams.center @ R0_t + o0_t
    return PostOptResult(cams, DepthSet(depths.log_depth.detach().clone()), trace, best_it)
