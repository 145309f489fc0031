import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from dualflow.errors import DimensionError, DomainError
from dualflow.metrics import REPORT_KEYS, depth_metrics, format_report, traj_metrics, umeyama
from dualflow.synth4d import make_scene


def _naive_depth(pred, gt, align):
    p, g = pred.ravel().tolist(), gt.ravel().tolist()
    ratios = sorted(gv / pv for pv, gv in zip(p, g))
    n = len(ratios)
    med = ratios[n // 2] if n % 2 else 0.5 * (ratios[n // 2 - 1] + ratios[n // 2])
    s = med if align else 1.0
    rel, inl = 0.0, 0
    for pv, gv in zip(p, g):
        q = pv * s
        rel += abs(q - gv) / gv
        inl += max(q / gv, gv / q) < 1.25
    return rel / n, inl / n


def _random_traj(rng, n):
    R = Rotation.random(n, random_state=rng.integers(1 << 31)).as_matrix()
    return R, rng.normal(size=(n, 3))


def _naive_traj(pred, gt, delta):
    """Loop-based reference; alignment found by generic numerical minimization."""
    (Rp, op), (Rg, og) = pred, gt
    n = len(op)

    def cost(x):
        s, rv, t = math.exp(x[0]), x[1:4], x[4:]
        R = Rotation.from_rotvec(rv).as_matrix()
        return sum(float(np.sum((s * R @ op[i] + t - og[i]) ** 2)) for i in range(n)) / n

    s0, R0, t0 = umeyama(op, og)
    starts = [np.zeros(7), np.r_[math.log(s0), Rotation.from_matrix(R0).as_rotvec(), t0]]
    best = min((minimize(cost, x0, method="BFGS", options={"gtol": 1e-12}) for x0 in starts), key=lambda r: r.fun)
    ate = math.sqrt(best.fun)
    s, R, t = math.exp(best.x[0]), Rotation.from_rotvec(best.x[1:4]).as_matrix(), best.x[4:]
    # camera-to-world poses of the aligned prediction
    c2w_p = [(R @ Rp[i].T, s * R @ op[i] + t) for i in range(n)]
    c2w_g = [(Rg[i].T, og[i]) for i in range(n)]
    et, er = [], []
    for i in range(n - delta):
        j = i + delta
        rel = []
        for poses in (c2w_p, c2w_g):
            (Ri, ti), (Rj, tj) = poses[i], poses[j]
            rel.append((Ri.T @ Rj, Ri.T @ (tj - ti)))
        (Rrp, trp), (Rrg, trg) = rel
        et.append(float(np.sum((trp - trg) ** 2)))
        E = Rrg.T @ Rrp
        er.append(np.degrees(np.linalg.norm(Rotation.from_matrix(E).as_rotvec())) ** 2)
    return ate, math.sqrt(sum(et) / len(et)), math.sqrt(sum(er) / len(er))


def test_depth_examples():
    gt = np.random.default_rng(0).uniform(0.5, 4, (3, 5, 5))
    r = depth_metrics(gt, gt)
    assert (r.abs_rel, r.delta_125) == (0.0, 1.0)
    r = depth_metrics(2 * gt, gt)
    assert r.abs_rel < 1e-15 and r.delta_125 == 1.0 and r.scale == 0.5
    r = depth_metrics(1.3 * gt, gt, align=False)
    assert abs(r.abs_rel - 0.3) < 1e-12 and r.delta_125 == 0.0


def test_depth_oracle_random():
    rng = np.random.default_rng(1)
    for k in range(100):
        shape = tuple(rng.integers(1, 6, 3))
        gt = rng.uniform(0.3, 5, shape)
        pred = gt * rng.uniform(0.5, 2.0) * np.exp(rng.normal(scale=0.3, size=shape))
        for align in (True, False):
            r = depth_metrics(pred, gt, align)
            a, d = _naive_depth(pred, gt, align)
            assert abs(r.abs_rel - a) < 1e-9 and abs(r.delta_125 - d) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_depth_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.3, 5, (2, 4, 4))
    pred = gt * np.exp(rng.normal(scale=0.3, size=gt.shape))
    a, b = depth_metrics(pred, gt), depth_metrics(c * pred, gt)
    # the median ratio absorbs c; equality is up to the rounding of c * pred
    assert abs(a.abs_rel - b.abs_rel) < 1e-12 and a.delta_125 == b.delta_125


def test_depth_scale_invariance_exact_for_powers_of_two():
    rng = np.random.default_rng(2)
    gt = rng.uniform(0.3, 5, (2, 4, 4))
    pred = gt * np.exp(rng.normal(scale=0.3, size=gt.shape))
    a = depth_metrics(pred, gt)
    for c in (0.25, 2.0, 1024.0):
        b = depth_metrics(c * pred, gt)
        assert (b.abs_rel, b.delta_125, b.scale) == (a.abs_rel, a.delta_125, a.scale / c)


def test_depth_errors():
    with pytest.raises(DimensionError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(DomainError):
        depth_metrics(np.ones((2, 2)), np.zeros((2, 2)))


def test_depth_accepts_depthset():
    scene = make_scene(0, 3, 8, 8)
    assert depth_metrics(scene.depths, scene.depths).abs_rel == 0.0


def test_traj_identity_and_similarity():
    rng = np.random.default_rng(3)
    R, o = _random_traj(rng, 6)
    r = traj_metrics((R, o), (R, o))
    assert (r.ate, r.rpe_t, r.rpe_r) == (0.0, 0.0, 0.0)
    Q = Rotation.random(random_state=4).as_matrix()
    t = np.array([1.0, -2.0, 0.5])
    # world change x' = 2 Q x + t: camera-to-world rotations become Q R_c2w
    moved = (R @ Q.T, 2.0 * o @ Q.T + t)
    r = traj_metrics(moved, (R, o))
    assert r.ate < 1e-9 and r.rpe_t < 1e-9 and r.rpe_r < 1e-6


def test_traj_oracle_random():
    rng = np.random.default_rng(5)
    for k in range(100):
        n = int(rng.integers(3, 9))
        gt = _random_traj(rng, n)
        pred = _random_traj(rng, n)
        delta = int(rng.integers(1, n))
        r = traj_metrics(pred, gt, delta)
        ate, rt, rr = _naive_traj(pred, gt, delta)
        assert abs(r.ate - ate) < 1e-9 * max(1.0, ate)
        assert abs(r.rpe_t - rt) < 1e-6 and abs(r.rpe_r - rr) < 1e-6


def test_traj_oracle_tight_near_truth():
    # small perturbations of a smooth path, the regime the evaluation runs in
    rng = np.random.default_rng(6)
    for k in range(100):
        n = int(rng.integers(3, 10))
        R, o = _random_traj(rng, n)
        Rp = np.stack([Rotation.from_rotvec(rng.normal(scale=0.01, size=3)).as_matrix() @ Ri for Ri in R])
        op = o + rng.normal(scale=0.02, size=o.shape)
        r = traj_metrics((Rp, op), (R, o))
        ate, rt, rr = _naive_traj((Rp, op), (R, o), 1)
        assert abs(r.ate - ate) < 1e-9
        assert abs(r.rpe_t - rt) < 1e-9 and abs(r.rpe_r - rr) < 1e-9


def test_traj_single_offset_hand_rmse():
    R = np.repeat(np.eye(3)[None], 4, axis=0)
    og = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    op = og.copy()
    op[2, 1] += 0.3
    ate, _, _ = _naive_traj((R, op), (R, og), 1)
    r = traj_metrics((R, op), (R, og))
    assert abs(r.ate - ate) < 1e-9 and 0 < r.ate < 0.3 / 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_ate_similarity_invariance(seed, s):
    rng = np.random.default_rng(seed)
    gt = _random_traj(rng, 6)
    Rp, op = _random_traj(rng, 6)
    Q = Rotation.random(random_state=seed % 1000).as_matrix()
    t = rng.normal(size=3) * 5
    base = traj_metrics((Rp, op), gt).ate
    moved = traj_metrics((Rp @ Q.T, s * op @ Q.T + t), gt).ate
    assert abs(base - moved) < 1e-9


def test_traj_errors():
    R, o = _random_traj(np.random.default_rng(0), 3)
    with pytest.raises(DomainError):
        traj_metrics((R[:1], o[:1]), (R[:1], o[:1]))
    with pytest.raises(DimensionError):
        traj_metrics((R, o), (R[:2], o[:2]))
    with pytest.raises(DomainError):
        traj_metrics((R, o), (R, o), delta=3)


def test_traj_accepts_cameraset():
    scene = make_scene(1, 5, 8, 8)
    r = traj_metrics(scene.cams, scene.cams)
    assert (r.ate, r.rpe_t, r.rpe_r) == (0.0, 0.0, 0.0)


def test_report_order():
    scene = make_scene(1, 5, 8, 8)
    rep = format_report(depth_metrics(scene.depths, scene.depths), traj_metrics(scene.cams, scene.cams))
    assert tuple(k for k, _ in rep) == REPORT_KEYS == ("abs_rel", "delta_125", "ate", "rpe_t", "rpe_r")
