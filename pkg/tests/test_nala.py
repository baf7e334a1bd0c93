"""Adaptive regularization-weight updates: recurrence, clamping, linearity."""

import numpy as np
import pytest

from mpmri.nala import nala_init, nala_step


def test_default_initial_state():
    s = nala_init()
    assert (s.lam, s.alpha, s.beta, s.m, s.t) == (0.1, 5e-4, 0.9, 0.0, 0)
    assert s.r_prev is None


def test_zero_lambda0_is_valid():
    assert nala_init(lambda0=0.0).lam == 0.0


def test_beta_zero_is_plain_gradient_descent():
    s = nala_init(lambda0=1.0, alpha=0.1, beta=0.0)
    s = nala_step(s, 0.5)
    assert s.m == 0.5
    assert s.lam == pytest.approx(1.0 - 0.1 * 0.5, abs=1e-15)


def test_constant_r_two_step_trajectory():
    # closed-form recurrence with defaults and constant r = 1
    s = nala_init()
    s = nala_step(s, 1.0)
    assert s.m == pytest.approx(1.0, abs=1e-15)
    assert s.lam == pytest.approx(0.0995, abs=1e-15)
    s = nala_step(s, 1.0)
    assert s.m == pytest.approx(1.9, abs=1e-15)
    assert s.lam == pytest.approx(0.09855, abs=1e-15)


def test_zero_r_keeps_lambda_constant():
    s = nala_init()
    for _ in range(10):
        s = nala_step(s, 0.0)
    assert s.lam == 0.1
    assert s.m == 0.0


def test_lambda_clamps_at_zero():
    s = nala_init(lambda0=1e-5, alpha=5e-4)
    s = nala_step(s, 1.0)
    assert s.lam == 0.0
    s = nala_step(s, 1.0)
    assert s.lam == 0.0


def test_alpha_linearity_before_clamp():
    rng = np.random.default_rng(0)
    rs = rng.uniform(0.0, 2.0, size=20)
    ratios = []
    for alpha in (1e-4, 5e-4, 1e-3):
        s = nala_init(lambda0=10.0, alpha=alpha)  # large lambda0: clamp never active
        for r in rs:
            s = nala_step(s, r)
        ratios.append((10.0 - s.lam) / alpha)
    assert abs(ratios[0] - ratios[1]) < 1e-12 * abs(ratios[0])
    assert abs(ratios[0] - ratios[2]) < 1e-12 * abs(ratios[0])


def test_monotone_nonincreasing_for_nonnegative_r():
    rng = np.random.default_rng(1)
    s = nala_init(lambda0=0.5)
    prev = s.lam
    for r in rng.uniform(0, 3, size=50):
        s = nala_step(s, float(r))
        assert s.m >= 0
        assert s.lam <= prev
        prev = s.lam


def test_step_is_pure_and_counts(self=None):
    s0 = nala_init()
    s1 = nala_step(s0, 0.7)
    assert s0.m == 0.0 and s0.t == 0 and s0.r_prev is None
    assert s1.t == 1 and s1.r_prev == 0.7


def test_invalid_arguments_rejected():
    with pytest.raises(ValueError):
        nala_init(lambda0=-0.1)
    with pytest.raises(ValueError):
        nala_init(alpha=0.0)
    with pytest.raises(ValueError):
        nala_init(beta=1.0)
    with pytest.raises(ValueError):
        nala_step(nala_init(), -0.5)
