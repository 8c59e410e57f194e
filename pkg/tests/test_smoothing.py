import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hivfit import smoothing
from hivfit.errors import ConfigurationError, DataValidationError, SingularDesignError


def _weighted_polyfit_oracle(t, y, x0, h, p, q, kernel="epanechnikov"):
    k = smoothing.KERNELS[kernel]
    w = k((t - x0) / h) / h
    keep = w > 0
    coef = np.polynomial.polynomial.polyfit(t[keep] - x0, y[keep], p, w=np.sqrt(w[keep]))
    return coef[q] * math.factorial(q)


@pytest.mark.parametrize("kernel", ["epanechnikov", "biweight", "uniform"])
@pytest.mark.parametrize("p,q", [(1, 0), (2, 1), (3, 2), (2, 0), (3, 1)])
def test_agrees_with_weighted_polyfit(kernel, p, q, rng):
    t = np.sort(rng.uniform(0, 10, 80))
    y = np.sin(t) + 0.1 * rng.standard_normal(80)
    x = np.linspace(1, 9, 9)
    ours = smoothing.local_poly_fit(t, y, smoothing.KernelSpec(kernel), p, q, x, bandwidth=2.0)
    ref = [_weighted_polyfit_oracle(t, y, x0, 2.0, p, q, kernel) for x0 in x]
    np.testing.assert_allclose(ours, ref, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("p,q", [(1, 0), (2, 1), (3, 2)])
def test_reproduces_polynomials_of_degree_p(p, q):
    t = np.linspace(0, 5, 40)
    coeffs = [1.5, -2.0, 0.7, 0.3][: p + 1]
    poly = np.polynomial.Polynomial(coeffs)
    x = np.linspace(0.0, 5.0, 11)
    got = smoothing.local_poly_fit(t, poly(t), smoothing.KernelSpec(), p, q, x, bandwidth=1.0)
    np.testing.assert_allclose(got, poly.deriv(q)(x), atol=1e-8)


def test_kernels_integrate_to_one():
    z = np.linspace(-1.2, 1.2, 240001)
    for f in smoothing.KERNELS.values():
        assert np.trapezoid(f(z), z) == pytest.approx(1.0, abs=1e-4)
        assert f(np.array([1.5]))[0] == 0


def test_q_greater_than_p_rejected():
    with pytest.raises(ConfigurationError):
        smoothing.local_poly_fit([0, 1, 2], [0, 1, 2], smoothing.KernelSpec(), 1, 2, [1.0], bandwidth=1)


def test_bandwidth_too_small_is_singular():
    t = np.arange(10.0)
    with pytest.raises(SingularDesignError):
        smoothing.local_poly_fit(t, t, smoothing.KernelSpec(), 1, 0, [4.5], bandwidth=0.4)


def test_unsorted_times_rejected():
    with pytest.raises(DataValidationError):
        smoothing.smooth_state([0, 2, 1, 3], [1, 2, 3, 4])


def test_bad_kernel_rejected():
    with pytest.raises(ConfigurationError):
        smoothing.KernelSpec("gaussian")


def test_cv_prefers_smoother_fit_for_noisy_line(rng):
    t = np.linspace(0, 20, 200)
    y = 3 * t + rng.normal(0, 5, t.size)
    h = smoothing.select_bandwidth(t, y)
    grid = smoothing.default_bandwidth_grid(t)
    assert h >= grid[len(grid) // 2]


def test_smooth_state_recovers_derivatives_of_smooth_curve():
    t = np.linspace(0, 20, 400)
    y = 100 * np.exp(-0.1 * t)
    s = smoothing.smooth_state(t, y)
    inner = ~s.boundary
    np.testing.assert_allclose(s.value[inner], y[inner], rtol=1e-3)
    np.testing.assert_allclose(s.deriv1[inner], -0.1 * y[inner], rtol=2e-2)
    np.testing.assert_allclose(s.deriv2[inner], 0.01 * y[inner], rtol=5e-2)
    assert s.bandwidth_rule == "loo-cv"


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(-100, 100),
    b=st.floats(-10, 10),
    h=st.floats(0.8, 5.0),
    x=st.floats(0.0, 10.0),
)
def test_local_linear_is_exact_on_lines(a, b, h, x):
    t = np.linspace(0, 10, 30)
    got = smoothing.local_poly_fit(t, a + b * t, smoothing.KernelSpec(), 1, 0, [x], bandwidth=h)
    assert got[0] == pytest.approx(a + b * x, abs=1e-8 * (1 + abs(a) + 10 * abs(b)))
