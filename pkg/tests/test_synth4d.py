import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualflow.errors import DomainError
from dualflow.metrics import _rotation_angle_deg
from dualflow.postopt import project_point, render_points
from dualflow.synth4d import DEPTH_RANGE, MAX_ROTATION_DEG, make_scene, perturb, render_rgb


def test_deterministic():
    a, b = make_scene(7, 5, 12, 10), make_scene(7, 5, 12, 10)
    assert torch.equal(a.pointmaps, b.pointmaps)
    assert torch.equal(a.depths.log_depth, b.depths.log_depth)
    assert torch.equal(a.cams.quat, b.cams.quat) and torch.equal(a.cams.center, b.cams.center)
    assert not torch.equal(a.pointmaps, make_scene(8, 5, 12, 10).pointmaps)


def test_single_frame_identity_camera():
    s = make_scene(3, 1, 8, 8)
    assert torch.equal(s.pointmaps[2, 0], s.depths.depth[0])


def test_closure_exact():
    s = make_scene(2, 6, 16, 16)
    again = render_points(s.cams, s.depths.depth).permute(3, 0, 1, 2)
    assert torch.equal(again, s.pointmaps)


def test_closure_per_pixel():
    s = make_scene(4, 3, 6, 7)
    for i in range(3):
        for y in range(6):
            for x in range(7):
                X = project_point(s.cams.focal[i], s.cams.quat[i], s.cams.center[i], s.depths.depth[i, y, x],
                                  x, y, s.cams.cx, s.cams.cy)
                assert torch.allclose(X, s.pointmaps[:, i, y, x], atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_scene_invariants(seed, n):
    s = make_scene(seed, n, 8, 8)
    d = s.depths.depth
    assert torch.isfinite(s.pointmaps).all()
    assert d.min() >= DEPTH_RANGE[0] * (1 - 1e-12) and d.max() <= DEPTH_RANGE[1] * (1 + 1e-12)
    assert s.cams.quat[0].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert s.cams.center[0].tolist() == [0.0, 0.0, 0.0]
    angles = _rotation_angle_deg(s.cams.rotations.numpy())
    assert angles.max() <= MAX_ROTATION_DEG + 1e-9
    # every pixel sits in front of its camera
    cam = torch.einsum("fij,fhwj->fhwi", s.cams.rotations, s.pointmaps.permute(1, 2, 3, 0) - s.cams.center.view(-1, 1, 1, 3))
    assert (cam[..., 2] > 0).all()


def test_argument_errors():
    with pytest.raises(DomainError):
        make_scene(0, 0, 8, 8)
    with pytest.raises(DomainError):
        make_scene(0, 2, 3, 8)
    with pytest.raises(DomainError):
        perturb(make_scene(0, 2, 8, 8), -1.0, 0)


def test_perturb():
    s = make_scene(0, 4, 32, 32)
    assert torch.equal(perturb(s, 0.0, 1), s.pointmaps)
    big = make_scene(1, 100, 32, 32)
    noise = perturb(big, 0.01, 3) - big.pointmaps
    assert noise.numel() >= 100_000
    assert abs(noise.std().item() / 0.01 - 1) < 0.05
    assert torch.equal(perturb(s, 0.01, 9), perturb(s, 0.01, 9))


def test_rgb_range():
    rgb = render_rgb(make_scene(5, 3, 8, 8).pointmaps)
    assert rgb.shape == (3, 3, 8, 8)
    assert rgb.abs().max() <= 1.0
