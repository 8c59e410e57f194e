import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hivfit import model, simlab, snls
from hivfit.errors import ConfigurationError
from hivfit.optimize import DEConfig, OptimizerSettings

COEFFS = (9e-6, 1.5e-5, 6e-6)
TRUTH = dict(zip(model.PARAM_NAMES, model.REFERENCE_PARAMS.as_tuple()))
FAST = snls.SNLSSettings(
    optimizer=OptimizerSettings(de=DEConfig(population_size=16, max_generations=4), epochs=1, refine_budget=600)
)


@pytest.fixture(scope="module")
def spline_truth():
    scen = simlab.ScenarioSpec(n=60, sigma1_sq=0.0, sigma2_sq=0.0, runs=1, eta_coeffs=COEFFS)
    return scen, simlab.generate_dataset(scen)


def _truth_start(scen):
    start = dict(TRUTH)
    start.update({f"a{j}": a for j, a in enumerate(scen.eta_coeffs, start=1)})
    return start


def test_information_criteria_arithmetic():
    ic = snls.information_criteria(40.0, 40, 8)
    assert ic["aic"] == pytest.approx(16.0)
    assert ic["bic"] == pytest.approx(29.511, abs=1e-3)
    assert ic["aicc"] == pytest.approx(20.645, abs=1e-3)


def test_aicc_unavailable_when_too_many_parameters():
    assert snls.information_criteria(1.0, 9, 8)["aicc"] is None


@settings(max_examples=200, deadline=None)
@given(rss=st.floats(1e-6, 1e9), n=st.integers(3, 5000), k=st.integers(1, 40))
def test_aicc_exceeds_aic(rss, n, k):
    ic = snls.information_criteria(rss, n, k)
    if n - k - 1 > 0:
        assert ic["aicc"] > ic["aic"]


def test_aicc_correction_vanishes_for_large_n():
    gaps = [snls.information_criteria(10.0 * n, n, 5)["aicc"] - snls.information_criteria(10.0 * n, n, 5)["aic"] for n in (50, 500, 50000)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-2


def test_rss_at_truth_vanishes_with_exact_eta(noiseless_obs, truth_scenario):
    obj = snls.RSSObjective(noiseless_obs, truth_scenario.spline_spec, t0=0.0, eta=model.reference_eta())
    theta = np.concatenate([model.REFERENCE_PARAMS.as_array(), np.zeros(3), model.REFERENCE_INIT.as_array()])
    assert obj(theta) < 1e-4


def test_rss_objective_matches_manual_sum(spline_truth, rng):
    scen, obs = spline_truth
    noisy = obs.with_values(obs.t_values + rng.normal(0, 3, obs.n_t), obs.v_values + rng.normal(0, 9, obs.n_v))
    theta = np.concatenate([model.REFERENCE_PARAMS.as_array(), COEFFS, model.REFERENCE_INIT.as_array()])
    truth_states = simlab.true_trajectory(scen)
    manual = np.sum((noisy.t_values - truth_states.total) ** 2) + np.sum((noisy.v_values - truth_states.v) ** 2)
    assert snls.rss_objective(theta, noisy, scen.spline_spec, t0=0.0) == pytest.approx(manual, rel=1e-8)
    doubled = replace(noisy, weights=(2.0, 2.0))
    assert snls.RSSObjective(doubled, scen.spline_spec, t0=0.0)(theta) == pytest.approx(2 * manual, rel=1e-12)


def test_log10_scale_residuals(spline_truth):
    scen, obs = spline_truth
    obj = snls.RSSObjective(obs.with_scales(v_scale="log10"), scen.spline_spec, t0=0.0)
    theta = np.concatenate([model.REFERENCE_PARAMS.as_array(), COEFFS, model.REFERENCE_INIT.as_array()])
    r_t, r_v = obj.residuals(theta)
    assert np.max(np.abs(r_v)) < 1e-9


def test_theta_length_checked(spline_truth):
    scen, obs = spline_truth
    with pytest.raises(ConfigurationError):
        snls.rss_objective(np.ones(5), obs, scen.spline_spec, t0=0.0)


def test_all_fixed_skips_optimizer(spline_truth):
    scen, obs = spline_truth
    fixed = _truth_start(scen) | scen.fixed_initial()
    fit = snls.fit_snls(obs, scen.spline_spec, None, FAST, fixed=fixed, t0=0.0)
    theta = np.array([fixed[n] for n in snls.theta_names(3)])
    assert fit.rss == snls.rss_objective(theta, obs, scen.spline_spec, t0=0.0)
    assert fit.k_free == 0
    assert fit.provenance["optimizer"]["termination"] == "no-free-parameters"


def test_fixed_values_bit_identical_and_truth_recovered(spline_truth):
    scen, obs = spline_truth
    fixed = {"delta": 0.5, "c": 3.0, **scen.fixed_initial()}
    start = _truth_start(scen)
    start["lambda"] = 30.0
    fit = snls.fit_snls(obs, scen.spline_spec, None, FAST, fixed=fixed, t0=0.0, start=start)
    vals = fit.theta_hat.as_dict()
    for name, v in fixed.items():
        assert vals[name] == v
    assert fit.k_free == 5 + 3 + 3 - len(fixed)
    assert fit.constants["lambda"] == pytest.approx(36.0, rel=1e-4)
    assert fit.rss < snls.PENALTY


def test_unknown_fixed_name_rejected(spline_truth):
    scen, obs = spline_truth
    with pytest.raises(ConfigurationError):
        snls.fit_snls(obs, scen.spline_spec, None, FAST, fixed={"gamma": 1.0}, t0=0.0)


def test_fit_result_dict_round_trip(spline_truth):
    scen, obs = spline_truth
    fit = snls.fit_snls(obs, scen.spline_spec, None, FAST, fixed=_truth_start(scen) | scen.fixed_initial(), t0=0.0)
    back = snls.FitResult.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.theta_hat.values, fit.theta_hat.values)
    assert back.rss == fit.rss and back.spec.label == fit.spec.label
    traj = snls.fitted_trajectory(back, obs.t_times)
    np.testing.assert_allclose(traj.total, fit.fitted_T, rtol=1e-10)


def test_bootstrap_needs_two_replicates(spline_truth):
    scen, obs = spline_truth
    fit = snls.fit_snls(obs, scen.spline_spec, None, FAST, fixed=_truth_start(scen) | scen.fixed_initial(), t0=0.0)
    for b in (0, 1):
        with pytest.raises(ConfigurationError):
            snls.bootstrap_ci(obs, fit, B=b)


def test_bootstrap_zero_residuals_degenerate(spline_truth):
    scen, obs = spline_truth
    fixed = scen.fixed_initial() | {k: v for k, v in _truth_start(scen).items() if k not in ("c", "delta")}
    fit = snls.fit_snls(obs, scen.spline_spec, None, FAST, fixed=fixed, t0=0.0, start={"c": 3.0, "delta": 0.5})
    assert fit.rss < 1e-12
    boot = snls.bootstrap_ci(obs, fit, B=4, seed=1, settings=FAST)
    assert boot.names == ("delta", "c")
    np.testing.assert_allclose(boot.lower, boot.point, rtol=1e-6)
    np.testing.assert_allclose(boot.upper, boot.point, rtol=1e-6)
    assert not boot.unreliable and boot.sanity_ok


def test_bootstrap_deterministic_and_brackets(spline_truth, rng):
    scen, obs = spline_truth
    noisy = obs.with_values(obs.t_values + rng.normal(0, 4, obs.n_t), obs.v_values + rng.normal(0, 10, obs.n_v))
    fixed = scen.fixed_initial() | {k: v for k, v in _truth_start(scen).items() if k not in ("c", "lambda")}
    fit = snls.fit_snls(noisy, scen.spline_spec, None, FAST, fixed=fixed, t0=0.0, start={"c": 3.0, "lambda": 36.0})
    a = snls.bootstrap_ci(noisy, fit, B=6, seed=3, settings=FAST)
    b = snls.bootstrap_ci(noisy, fit, B=6, seed=3, settings=FAST)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert np.all(a.lower <= a.upper)
    assert a.eta_lower.shape == (snls.ETA_GRID_SIZE,)


def test_selection_marks_unavailable_and_ranks(spline_truth):
    scen, obs = spline_truth
    fixed = scen.fixed_initial() | {k: v for k, v in TRUTH.items()}
    warm = lambda spec: {f"a{j}": (1e-6, 5e-5) for j in range(1, spec.n_control + 1)}
    res = snls.select_model(obs, [(3, 2), (2, 3), (3, 3)], warm, FAST, spacing="linear", fixed=fixed, t0=0.0)
    notes = {(c.order_k, c.n_control): c for c in res.candidates}
    assert not notes[(3, 2)].available and notes[(3, 2)].note == "s < k"
    ranked = res.ranked()
    assert [c.aicc for c in ranked] == sorted(c.aicc for c in ranked)
    assert res.best_label == (ranked[0].order_k, ranked[0].n_control)


def test_selection_rejects_empty_grid(spline_truth):
    _, obs = spline_truth
    with pytest.raises(ConfigurationError):
        snls.select_model(obs, [], settings=FAST)


def test_default_grid_contents():
    g = snls.default_grid()
    assert (2, 3) in g and (4, 10) in g and (3, 2) not in g
    assert len(g) == 3 + 16


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        snls.SNLSSettings(warm_policy="sometimes")
    with pytest.raises(ConfigurationError):
        snls.SNLSSettings(step=0.0)
    assert snls.SNLSSettings().with_seed(7).optimizer.seed == 7
