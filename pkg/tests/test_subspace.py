import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfsm.subspace import (MagnitudeSchedule, StyleSubspace, magnitude_target, orthogonality_loss,
                           sample_coefficient, to_style_code)

DEFAULT_SCHEDULE = MagnitudeSchedule(l_a=0.0, u_a=6.0, l_m=0.05, u_m=0.65)


def test_sample_shape_and_determinism():
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    a = [sample_coefficient(g1, 10) for _ in range(5)]
    b = [sample_coefficient(g2, 10) for _ in range(5)]
    assert a[0].shape == (10,)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        sample_coefficient(g1, 0)


def test_sample_moments():
    o = sample_coefficient(torch.Generator().manual_seed(0), 10, batch=100_000).double()
    assert o.mean(0).abs().max() < 0.02
    assert (o.var(0) - 1).abs().max() < 0.03


def test_style_code_zero_and_identity_basis():
    s = StyleSubspace(d=8, q=3)
    with torch.no_grad():
        s.mu.copy_(torch.arange(8.0))
    assert torch.equal(to_style_code(s, torch.zeros(3)), s.mu)

    s2 = StyleSubspace(d=2, q=1)
    with torch.no_grad():
        s2.U.copy_(torch.tensor([[1.0], [0.0]]))
        s2.mu.zero_()
    assert to_style_code(s2, torch.tensor([2.0])).tolist() == [2.0, 0.0]


def test_style_code_dimension_mismatch():
    with pytest.raises(ValueError):
        to_style_code(StyleSubspace(d=8, q=3), torch.zeros(4))


def test_style_code_is_affine():
    torch.manual_seed(0)
    s = StyleSubspace(d=32, q=5).double()
    with torch.no_grad():
        s.mu.normal_()
    for _ in range(100):
        o1, o2 = torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
        lhs = to_style_code(s, o1 + o2) - s.mu
        rhs = (to_style_code(s, o1) - s.mu) + (to_style_code(s, o2) - s.mu)
        assert torch.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_subspace_requires_q_below_d():
    with pytest.raises(ValueError):
        StyleSubspace(d=4, q=4)


def test_orthogonality_loss_values():
    assert orthogonality_loss(torch.eye(6)[:, :3]).item() == 0.0
    U = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert orthogonality_loss(U).item() == 2.0
    torch.manual_seed(0)
    for _ in range(20):
        assert orthogonality_loss(torch.randn(7, 3)).item() >= 0


def _ort_numpy(U):
    return np.abs(U.T @ U - np.eye(U.shape[1])).sum()


def test_orthogonality_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 20:
        U = rng.normal(size=(6, 3)) / np.sqrt(6)
        if np.min(np.abs(U.T @ U - np.eye(3))) < 1e-3:
            continue
        Ut = torch.tensor(U, requires_grad=True)
        orthogonality_loss(Ut).backward()
        h = 1e-6
        fd = np.zeros_like(U)
        for idx in np.ndindex(U.shape):
            e = np.zeros_like(U)
            e[idx] = h
            fd[idx] = (_ort_numpy(U + e) - _ort_numpy(U - e)) / (2 * h)
        rel = np.abs(Ut.grad.numpy() - fd).max() / np.abs(fd).max()
        assert rel < 1e-4
        checked += 1


def test_magnitude_target_paper_values():
    assert magnitude_target(DEFAULT_SCHEDULE, 0.0) == pytest.approx(0.05, abs=1e-12)
    assert magnitude_target(DEFAULT_SCHEDULE, 6.0) == pytest.approx(0.65, abs=1e-12)
    assert magnitude_target(DEFAULT_SCHEDULE, 3.0) == pytest.approx(0.35, abs=1e-12)


def test_magnitude_target_clamps():
    assert magnitude_target(DEFAULT_SCHEDULE, 9.0) == pytest.approx(0.65)
    t = magnitude_target(DEFAULT_SCHEDULE, torch.tensor([-1.0, 7.0]))
    assert torch.allclose(t, torch.tensor([0.05, 0.65]))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 20), st.floats(0, 20))
def test_magnitude_target_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert magnitude_target(DEFAULT_SCHEDULE, lo) <= magnitude_target(DEFAULT_SCHEDULE, hi)


def test_schedule_validation():
    with pytest.raises(ValueError):
        MagnitudeSchedule(l_a=1, u_a=1)
    with pytest.raises(ValueError):
        MagnitudeSchedule(l_m=0.5, u_m=0.1)
