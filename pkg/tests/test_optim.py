import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualflow.errors import DomainError, NumericError
from dualflow.optim import OptimConfig, ParamSet, finite_difference, grad, gradient_check, step


def _scalar(v):
    return torch.tensor([v], dtype=torch.float64)


def test_square_gradient():
    ps = ParamSet({"x": _scalar(3.0)})
    value = grad(lambda: (ps.params["x"] ** 2).sum(), ps)
    assert value == 9.0 and ps.params["x"].grad.item() == 6.0


def test_abs_subgradient_at_zero():
    ps = ParamSet({"x": _scalar(0.0)})
    grad(lambda: ps.params["x"].abs().sum(), ps)
    assert ps.params["x"].grad.item() == 0.0


def test_untouched_parameter_gets_zero_grad():
    ps = ParamSet({"a": _scalar(1.0), "b": _scalar(2.0)})
    grad(lambda: ps.params["a"].sum() * 3, ps)
    assert ps.params["b"].grad.item() == 0.0


def test_non_finite_loss_raises():
    ps = ParamSet({"x": _scalar(-1.0)})
    with pytest.raises(NumericError):
        grad(lambda: torch.log(ps.params["x"]).sum(), ps)


def test_composite_graph_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    ps = ParamSet({
        "w": torch.randn(4, 5, generator=g, dtype=torch.float64),
        "b": torch.randn(5, generator=g, dtype=torch.float64),
        "s": torch.rand(3, generator=g, dtype=torch.float64) + 0.5,
    })
    x = torch.randn(6, 4, generator=g, dtype=torch.float64)

    def loss():
        p = ps.params
        h = torch.softmax(x @ p["w"] + p["b"], dim=1)
        h = torch.exp(-h) * torch.log(p["s"].sum() + h)
        return torch.linalg.vector_norm(h) + (h.abs() * p["s"][0]).sum()

    report = gradient_check(loss, ps, h=1e-5)
    assert max(report.values()) < 1e-4, report


def test_finite_difference_restores_tensor():
    t = torch.tensor([1.0, 2.0], dtype=torch.float64)
    fd = finite_difference(lambda: (t ** 3).sum(), t)
    assert t.tolist() == [1.0, 2.0]
    assert torch.allclose(fd, torch.tensor([3.0, 12.0], dtype=torch.float64), rtol=1e-8)


def test_zero_gradient_no_change():
    ps = ParamSet({"x": torch.tensor([1.5, -2.0], dtype=torch.float64)})
    ps.params["x"].grad = torch.zeros(2, dtype=torch.float64)
    step(ps, OptimConfig(lr=0.1))
    assert ps.params["x"].tolist() == [1.5, -2.0]


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-5, 1e-1), st.booleans())
def test_first_step_magnitude(g, lr, neg):
    g = -g if neg else g
    ps = ParamSet({"x": _scalar(0.0)})
    ps.params["x"].grad = _scalar(g)
    step(ps, OptimConfig(lr=lr))
    # bias correction makes the first update lr * g / (|g| + eps)
    expected = -lr * g / (abs(g) + 1e-8)
    assert math.isclose(ps.params["x"].item(), expected, rel_tol=1e-12)


def test_quadratic_bowl_converges():
    target = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    ps = ParamSet({"x": torch.zeros(3, dtype=torch.float64)})
    cfg = OptimConfig(lr=1e-2)
    for k in range(5000):
        grad(lambda: ((ps.params["x"] - target) ** 2).sum(), ps)
        step(ps, cfg)
        if (ps.params["x"] - target).abs().max() < 1e-6:
            break
    assert (ps.params["x"] - target).abs().max() < 1e-6


def test_step_errors():
    ps = ParamSet({"x": _scalar(1.0)})
    with pytest.raises(DomainError):
        step(ps, OptimConfig())
    ps.params["x"].grad = _scalar(float("nan"))
    with pytest.raises(NumericError):
        step(ps, OptimConfig())
    with pytest.raises(DomainError):
        step(ps, OptimConfig(), t=0)
    with pytest.raises(DomainError):
        OptimConfig(beta1=1.0)
    with pytest.raises(DomainError):
        OptimConfig(eps=0.0)


def _run(ps, steps, start=0):
    cfg = OptimConfig(lr=0.05)
    for k in range(start, steps):
        grad(lambda: (torch.sin(ps.params["x"] * (k + 1)) ** 2).sum() + (ps.params["x"] ** 2).sum(), ps)
        step(ps, cfg)


def test_state_roundtrip_resume_bit_exact():
    full = ParamSet({"x": torch.linspace(-1, 1, 5, dtype=torch.float64)})
    _run(full, 40)
    first = ParamSet({"x": torch.linspace(-1, 1, 5, dtype=torch.float64)})
    _run(first, 15)
    records = {k: v.clone() for k, v in first.state_records("p/").items()}
    resumed = ParamSet({"x": torch.zeros(5, dtype=torch.float64)})
    resumed.load_records(records, "p/")
    assert resumed.t == 15
    _run(resumed, 40, start=15)
    assert torch.equal(resumed.params["x"], full.params["x"])
    assert torch.equal(resumed.m["x"], full.m["x"]) and torch.equal(resumed.v["x"], full.v["x"])
