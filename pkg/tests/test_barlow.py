import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regconsist.ssl.barlow import barlow_backward, barlow_loss, cross_correlation


def numeric_grad(f, X, h=1e-6):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        old = X[idx]
        X[idx] = old + h
        up = f()
        X[idx] = old - h
        down = f()
        X[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def test_worked_value():
    C = np.array([[1.0, 0.5], [0.5, 1.0]])
    assert abs(barlow_loss(C, 0.005) - 0.0025) <= 1e-12


def test_identity_is_zero():
    assert barlow_loss(np.eye(7)) == 0.0


def test_loss_closed_form_random():
    rng = np.random.default_rng(0)
    C = rng.uniform(-1, 1, (5, 5))
    lam = 0.01
    ref = sum((1 - C[i, i]) ** 2 for i in range(5)) + lam * sum(C[i, j] ** 2 for i in range(5) for j in range(5) if i != j)
    assert barlow_loss(C, lam) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("center", [True, False])
def test_gradient_finite_differences(center):
    rng = np.random.default_rng(1 if center else 2)
    worst = 0.0
    for _ in range(25):
        B, D = int(rng.integers(3, 12)), int(rng.integers(1, 6))
        P, Q = rng.normal(size=(B, D)), rng.normal(size=(B, D))
        lam = float(rng.uniform(0.001, 0.1))
        _, dP, dQ = barlow_backward(P, Q, lam, center)
        nP = numeric_grad(lambda: barlow_loss(cross_correlation(P, Q, center).C, lam), P)
        nQ = numeric_grad(lambda: barlow_loss(cross_correlation(P, Q, center).C, lam), Q)
        worst = max(worst, max_rel_err(dP, nP), max_rel_err(dQ, nQ))
    assert worst < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_correlation_bounded(B, D, seed):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(B, D)), rng.normal(size=(B, D))
    cc = cross_correlation(P, Q)
    assert cc.C.shape == (D, D)
    assert np.all(np.abs(cc.C) <= 1 + 1e-12)


def test_identical_views_unit_diagonal():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(50, 4))
    assert np.allclose(np.diag(cross_correlation(P, P.copy()).C), 1.0)


def test_shift_and_scale_invariant():
    rng = np.random.default_rng(4)
    P, Q = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    a = barlow_backward(P, Q)[0]
    b = barlow_backward(P * 3.0 + 1.0, Q * 0.5 - 2.0)[0]
    assert a == pytest.approx(b, abs=1e-10)


def test_errors():
    with pytest.raises(ValueError, match="zero variance"):
        cross_correlation(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))
    with pytest.raises(ValueError):
        cross_correlation(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        cross_correlation(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        barlow_loss(np.zeros((2, 3)))
