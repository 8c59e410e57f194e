import numpy as np
import pytest

from hivfit import bspline, model, mssb, simlab
from hivfit.data import ObservationSet
from hivfit.errors import DataValidationError
from hivfit.smoothing import SmoothEstimate

LAM, RHO, NV, DELTA, C = 36.0, 0.108, 1000.0, 0.5, 3.0
# V' = a0 + a1 T + a2 T' - c V follows from T' = lambda - rho T + (rho - delta) T_I
ALPHA2 = NV * DELTA / (RHO - DELTA)
ALPHA1 = RHO * ALPHA2
ALPHA0 = -LAM * ALPHA2


def test_hand_derived_alphas():
    assert ALPHA2 == pytest.approx(-1275.5102, rel=1e-7)
    assert ALPHA1 == pytest.approx(-137.7551, rel=1e-6)
    assert ALPHA0 == pytest.approx(45918.367, rel=1e-7)


def _exact_smooths(spec, coeffs, times):
    """Smooth estimates carrying the exact states and derivatives."""
    eta = model.SplineEta(spec, coeffs)
    sol = model.integrate(model.REFERENCE_INIT, model.REFERENCE_PARAMS, eta, times, 0.001, t0=0.0)
    tu, ti, v = sol.t_u, sol.t_i, sol.v
    e = eta(times)
    d_tu = LAM - RHO * tu - e * tu * v
    d_ti = e * tu * v - DELTA * ti
    d_v = NV * DELTA * ti - C * v
    d2_v = NV * DELTA * d_ti - C * d_v
    zeros = np.zeros_like(times)
    bw = (1.0, 1.0, 1.0)
    sT = SmoothEstimate(times, tu + ti, d_tu + d_ti, zeros, bw)
    sV = SmoothEstimate(times, v, d_v, d2_v, bw)
    return sT, sV


@pytest.fixture(scope="module")
def exact_case():
    spec = bspline.make_spec(2, 3, (0.0, 20.0), "linear")
    coeffs = np.array([9e-6, 1.5e-5, 6e-6])
    times = np.linspace(0.1, 20.0, 150)
    return spec, coeffs, _exact_smooths(spec, coeffs, times)


def test_stage2_exact_under_exact_plugins(exact_case):
    _, _, (sT, sV) = exact_case
    res = mssb.stage2_psls(sT, sV)
    assert res.alpha2 == pytest.approx(ALPHA2, rel=1e-6)
    assert res.alpha1 == pytest.approx(ALPHA1, rel=1e-6)
    assert res.alpha0 == pytest.approx(ALPHA0, rel=1e-6)
    assert res.c_hat == pytest.approx(C, rel=1e-8)
    assert res.lambda_hat == pytest.approx(LAM, rel=1e-6)
    assert res.rho_hat == pytest.approx(RHO, rel=1e-6)


def test_stage3_exact_under_exact_plugins(exact_case):
    spec, coeffs, (sT, sV) = exact_case
    res = mssb.stage3_semiparametric(sT, sV, C, spec)
    assert res.delta_hat == pytest.approx(DELTA, rel=1e-6)
    np.testing.assert_allclose(res.eta_coeffs, coeffs, rtol=1e-6)
    np.testing.assert_allclose(res.n_delta_coeffs, NV * DELTA * coeffs, rtol=1e-6)
    assert res.n_virions_hat == pytest.approx(NV, rel=1e-6)


def test_stage3_with_delta_fixed(exact_case):
    spec, coeffs, (sT, sV) = exact_case
    res = mssb.stage3_semiparametric(sT, sV, C, spec, delta_fixed=DELTA)
    assert res.delta_hat == DELTA
    np.testing.assert_allclose(res.eta_coeffs, coeffs, rtol=1e-6)


def test_degenerate_alpha2_flags_missing_lambda_rho():
    t = np.linspace(0, 10, 30)
    T = 2 + np.cos(t)
    V = np.exp(-0.3 * t) + 0.1 * t
    sT = SmoothEstimate(t, T, np.sin(2 * t), np.zeros_like(t), (1, 1, 1))
    sV = SmoothEstimate(t, V, 1 + 2 * T - 3 * V, np.zeros_like(t), (1, 1, 1))
    res = mssb.stage2_psls(sT, sV)
    assert res.degenerate and res.lambda_hat is None and res.rho_hat is None
    assert res.c_hat == pytest.approx(3.0)


def test_recovery_identities(noiseless_obs, truth_scenario):
    est = mssb.run_mssb(noiseless_obs, truth_scenario.spline_spec, t0=0.0)
    p = est.psls
    assert p.lambda_hat * p.alpha2 == pytest.approx(-p.alpha0, rel=1e-12)
    assert p.rho_hat * p.alpha2 == pytest.approx(p.alpha1, rel=1e-12)


def test_too_few_points_rejected():
    t = np.arange(1.0, 6.0)
    obs = ObservationSet(t, 500 + t, t, 1e4 + t)
    with pytest.raises(DataValidationError):
        mssb.run_mssb(obs, bspline.make_spec(2, 3, (0.0, 5.0)))


def test_noiseless_dense_data_recovers_constants():
    scen = simlab.ScenarioSpec(n=2000, sigma1_sq=0.0, sigma2_sq=0.0, runs=1)
    obs = simlab.generate_dataset(scen)
    est = mssb.run_mssb(obs, scen.spline_spec, t0=0.0)
    truth = model.REFERENCE_PARAMS.as_array()
    rel = np.abs(est.constants.as_array() - truth) / truth
    assert np.all(rel < 0.05), rel


def test_search_ranges_bracket_positive_estimates(noiseless_obs, truth_scenario):
    est = mssb.run_mssb(noiseless_obs, truth_scenario.spline_spec, t0=0.0)
    for name in model.PARAM_NAMES:
        lo, hi = est.search_ranges[name]
        val = est.constants.as_dict()[name]
        assert lo < hi
        if val is not None and val > 0 and name not in est.flags:
            assert lo <= val <= hi


def test_fixed_c_is_used():
    scen = simlab.ScenarioSpec(n=200, sigma1_sq=0.0, sigma2_sq=0.0, runs=1)
    obs = simlab.generate_dataset(scen)
    est = mssb.run_mssb(obs, scen.spline_spec, fixed={"c": 3.0}, t0=0.0)
    assert est.constants.c == 3.0
    assert est.search_ranges["c"] == (3.0, 3.0)
