import math
from fractions import Fraction

import numpy as np
import pytest

from mrdiffusion.errors import InvalidInputError
from mrdiffusion.schedule import build_schedule, linear_beta, predict_x0, q_sample


@pytest.mark.parametrize("T", [2, 10, 50, 100, 1000])
def test_beta_endpoints_exact(T):
    assert linear_beta(1, T) == 1e-4
    assert linear_beta(T, T) == 2e-2
    s = build_schedule(T)
    assert s.betas[1] == 1e-4 and s.betas[T] == 2e-2


def test_beta_midpoint_and_errors():
    assert linear_beta(500, 999) == pytest.approx(1.005e-2, abs=1e-15)
    assert linear_beta(1, 1) == 1e-4
    for bad in (0, 11):
        with pytest.raises(InvalidInputError):
            linear_beta(bad, 10)
    with pytest.raises(InvalidInputError):
        build_schedule(0)


def test_T2_hand_values():
    # exact rational arithmetic as the oracle
    b1, b2 = Fraction(1, 10**4), Fraction(2, 100)
    ab1 = 1 - b1
    ab2 = ab1 * (1 - b2)
    post2 = (1 - ab1) / (1 - ab2) * b2
    s = build_schedule(2)
    assert s.alpha_bars[1] == pytest.approx(float(ab1), abs=1e-15)
    assert s.alpha_bars[2] == pytest.approx(0.979902, abs=1e-12)
    assert s.posterior_vars[2] == pytest.approx(float(post2), rel=1e-12)
    assert s.posterior_vars[2] == pytest.approx(9.951e-5, rel=1e-3)


@pytest.mark.parametrize("T", [1, 2, 7, 50, 100, 1000])
def test_schedule_invariants(T):
    s = build_schedule(T)
    b = s.betas[1:]
    assert np.all((b > 0) & (b < 1))
    if T > 2:
        d = np.diff(b)
        assert np.all(d > 0)
        np.testing.assert_allclose(d, d[0], rtol=1e-9)
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert 0 < s.alpha_bars[T] < 1
    log_sum = np.cumsum(np.log(s.alphas[1:]))
    np.testing.assert_allclose(np.log(s.alpha_bars[1:]), log_sum, atol=1e-10)
    assert s.posterior_vars[1] == 0.0
    assert np.all(s.posterior_vars[2:] < s.betas[2:])


def test_T1000_nearly_pure_noise():
    oracle = math.exp(sum(math.log1p(-linear_beta(t, 1000)) for t in range(1, 1001)))
    s = build_schedule(1000)
    assert s.alpha_bars[1000] == pytest.approx(oracle, rel=1e-9)
    assert s.alpha_bars[1000] < 1e-4


def test_q_sample_predict_x0_inverse():
    s = build_schedule(10)
    rng = np.random.default_rng(0)
    x0 = rng.random((8, 8)).astype(np.float32)
    eps = rng.standard_normal((8, 8)).astype(np.float32)
    for t in range(1, 11):
        xt = q_sample(x0, t, eps, s)
        np.testing.assert_allclose(predict_x0(xt, eps, t, s), x0, atol=1e-5)
    np.testing.assert_allclose(q_sample(x0, 4, np.zeros_like(x0), s), math.sqrt(s.alpha_bars[4]) * x0)
    np.testing.assert_allclose(
        predict_x0(x0, np.zeros_like(x0), 4, s), x0 / math.sqrt(s.alpha_bars[4]), rtol=1e-6
    )
    pure = eps * math.sqrt(1 - s.alpha_bars[10])
    np.testing.assert_allclose(predict_x0(pure, eps, 10, s), 0, atol=1e-6)


def test_q_sample_small_t_bound():
    s = build_schedule(1000)
    rng = np.random.default_rng(1)
    x0, eps = rng.random((16, 16)), rng.standard_normal((16, 16))
    x1 = q_sample(x0, 1, eps, s)
    ab = s.alpha_bars[1]
    bound = math.sqrt(1 - ab) * np.linalg.norm(eps) + (1 - math.sqrt(ab)) * np.linalg.norm(x0)
    assert np.linalg.norm(x1 - x0) <= bound + 1e-12


@pytest.mark.parametrize("t", [1, 10, 25, 50])
def test_forward_moments_monte_carlo(t):
    s = build_schedule(50)
    n = 100_000
    rng = np.random.default_rng(t)
    x0 = np.full(n, 0.6)
    xt = q_sample(x0, t, rng.standard_normal(n), s)
    ab = s.alpha_bars[t]
    var = 1 - ab
    assert abs(xt.mean() - math.sqrt(ab) * 0.6) < 3 * math.sqrt(var / n)
    # variance of the sample variance of a Gaussian: 2 var^2 / (n - 1)
    assert abs(xt.var() - var) < 3 * var * math.sqrt(2 / (n - 1))
    zero = q_sample(np.zeros(n), t, rng.standard_normal(n), s)
    assert abs(zero.var() / var - 1) < 0.02


def test_shape_mismatch():
    s = build_schedule(5)
    with pytest.raises(InvalidInputError):
        q_sample(np.zeros((2, 2)), 1, np.zeros((2, 3)), s)
    with pytest.raises(InvalidInputError):
        q_sample(np.zeros((2, 2)), 6, np.zeros((2, 2)), s)
