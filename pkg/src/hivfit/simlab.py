"""Monte Carlo comparison of MSSB and SNLS on simulated HIV dynamics."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bspline, model
from .data import ObservationSet
from .errors import ConfigurationError, DomainError, HivFitError
from .model import REFERENCE_INIT, REFERENCE_PARAMS, PARAM_NAMES
from .mssb import run_mssb
from .snls import SNLSSettings, fit_snls

log = logging.getLogger(__name__)

METHODS = ("mssb", "snls")
ETA_GUARD = 1e-7
ETA_GRID_SIZE = 200


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation setting: grid size, noise variances and truth.

    Observations sit at ``t = span * j / n`` for ``j = 1..n``; the initial
    state applies at ``t = 0``. With ``fix_initial`` the fits hold the initial
    state at its true value.
    """

    n: int = 200
    sigma1_sq: float = 20.0
    sigma2_sq: float = 100.0
    runs: int = 50
    seed: int = 0
    span: float = 20.0
    order_k: int = 2
    n_control: int = 3
    spacing: str = "linear"
    fix_initial: bool = True
    truth: tuple[float, ...] = tuple(REFERENCE_PARAMS.as_array())
    initial_state: tuple[float, float, float] = tuple(REFERENCE_INIT.as_array())
    eta_coeffs: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError(f"n must be positive, got {self.n}")
        if self.sigma1_sq < 0 or self.sigma2_sq < 0:
            raise ConfigurationError("noise variances must be nonnegative")
        if self.runs < 1:
            raise ConfigurationError(f"runs must be at least 1, got {self.runs}")
        if not self.span > 0:
            raise ConfigurationError("span must be positive")
        if len(self.truth) != 5 or len(self.initial_state) != 3:
            raise ConfigurationError("truth needs 5 constants and 3 initial states")
        if self.eta_coeffs is not None and len(self.eta_coeffs) != self.n_control:
            raise ConfigurationError("eta_coeffs must have one entry per control point")

    @property
    def times(self) -> np.ndarray:
        return self.span * np.arange(1, self.n + 1) / self.n

    @property
    def spline_spec(self) -> bspline.SplineSpec:
        return bspline.make_spec(self.order_k, self.n_control, (0.0, self.span), self.spacing)

    @property
    def params(self) -> model.ConstantParams:
        return model.ConstantParams(*self.truth)

    def true_eta(self):
        """The infection-rate curve used to generate data."""
        if self.eta_coeffs is None:
            return model.reference_eta((0.0, max(self.span, 1000.0)))
        return model.SplineEta(self.spline_spec, self.eta_coeffs)

    def fixed_initial(self) -> dict[str, float]:
        if not self.fix_initial:
            return {}
        return dict(zip(("T_U0", "T_I0", "V0"), self.initial_state))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truth"] = dict(zip(PARAM_NAMES, self.truth))
        d["grid"] = "t = span*j/n, j = 1..n; initial state at t = 0"
        return d


def _scenario_key(n: int, s1: float, s2: float) -> str:
    return f"n{n}-{s1:g}-{s2:g}"


#: The variance grid of the published comparison, keyed ``n<n>-<s1>-<s2>``.
SCENARIOS: dict[str, ScenarioSpec] = {
    _scenario_key(n, s1, s2): ScenarioSpec(n=n, sigma1_sq=s1, sigma2_sq=s2)
    for n, pairs in (
        (30, ((400, 2500), (900, 5625), (1600, 10000))),
        (50, ((400, 2500), (900, 5625), (1600, 10000))),
        (100, ((20, 100), (30, 150), (40, 200))),
        (200, ((20, 100), (30, 150), (40, 200))),
    )
    for s1, s2 in pairs
}


def get_scenario(key: str, **overrides) -> ScenarioSpec:
    try:
        base = SCENARIOS[key]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {key!r}; known: {', '.join(SCENARIOS)}") from None
    return replace(base, **overrides) if overrides else base


def run_seed(scenario: ScenarioSpec, run: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([scenario.seed, run])


def true_trajectory(scenario: ScenarioSpec) -> model.TrajectorySolution:
    return model.integrate(
        model.StateVector(*scenario.initial_state),
        scenario.params,
        scenario.true_eta(),
        scenario.times,
        t0=0.0,
    )


def generate_dataset(scenario: ScenarioSpec, run: int = 0) -> ObservationSet:
    """Truth plus independent Gaussian noise on the raw scale."""
    sol = true_trajectory(scenario)
    rng = np.random.default_rng(run_seed(scenario, run))
    n = scenario.n
    t_vals = sol.total + rng.normal(0.0, math.sqrt(scenario.sigma1_sq), n)
    v_vals = sol.v + rng.normal(0.0, math.sqrt(scenario.sigma2_sq), n)
    times = scenario.times
    return ObservationSet(times, t_vals, times, v_vals, meta={"scenario": scenario.to_dict(), "run": run})


def compute_are(truth: float, estimates) -> float:
    """Average relative estimation error in percent.

    >>> compute_are(2.0, [1.0, 3.0])
    50.0
    """
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if truth == 0:
        raise DomainError("ARE is undefined for a true value of zero")
    if est.size == 0:
        raise ConfigurationError("ARE needs at least one estimate")
    return float(np.mean(np.abs(truth - est)) / abs(truth) * 100.0)


@dataclass
class RunOutcome:
    run: int
    estimates: dict[str, np.ndarray | None]
    eta: dict[str, np.ndarray | None]
    errors: dict[str, str] = field(default_factory=dict)


def run_once(scenario: ScenarioSpec, run: int, methods: Sequence[str], settings: SNLSSettings | None = None) -> RunOutcome:
    """Generate one dataset and estimate it with the requested methods.

    SNLS is warm-started from the MSSB estimate when that succeeds.
    """
    obs = generate_dataset(scenario, run)
    spec = scenario.spline_spec
    eta_t = np.linspace(obs.t_start, obs.t_end, ETA_GRID_SIZE)
    out = RunOutcome(run, {m: None for m in methods}, {m: None for m in methods})
    est = None
    try:
        est = run_mssb(obs, spec, t0=0.0)
        if "mssb" in methods and est.constants.missing():
            out.errors["mssb"] = f"not recovered: {', '.join(est.constants.missing())}"
        elif "mssb" in methods:
            out.estimates["mssb"] = est.constants.as_array()
            out.eta["mssb"] = np.asarray(est.eta(eta_t))
    except HivFitError as exc:
        out.errors["mssb"] = str(exc)
    if "snls" in methods:
        settings = (settings or SNLSSettings()).with_seed(int(run_seed(scenario, run).generate_state(1)[0]))
        try:
            fit = fit_snls(obs, spec, est, settings, fixed=scenario.fixed_initial(), t0=0.0)
            out.estimates["snls"] = np.array([fit.constants[n] for n in PARAM_NAMES])
            out.eta["snls"] = np.asarray(bspline.curve_eval(spec, fit.eta_coeffs, eta_t))
        except HivFitError as exc:
            out.errors["snls"] = str(exc)
    return out


@dataclass
class AREReport:
    scenario: ScenarioSpec
    methods: tuple[str, ...]
    are: dict[str, dict[str, float | None]]
    estimates: dict[str, np.ndarray]
    eta_are_curve: dict[str, np.ndarray | None]
    eta_are: dict[str, float | None]
    eta_times: np.ndarray
    failures: dict[str, int]
    errors: list[dict]
    settings: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for m in self.methods:
            row = {"n": self.scenario.n, "sigma1_sq": self.scenario.sigma1_sq,
                   "sigma2_sq": self.scenario.sigma2_sq, "method": m}
            row.update({p: self.are[m][p] for p in PARAM_NAMES})
            row["eta"] = self.eta_are[m]
            row["runs_used"] = int(len(self.estimates[m]))
            row["failures"] = self.failures[m]
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if v is None else v) for k, v in r.items()})

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "methods": list(self.methods),
            "are_percent": self.are,
            "eta_are_percent": self.eta_are,
            "eta_times": self.eta_times.tolist(),
            "eta_are_curve": {m: None if c is None else c.tolist() for m, c in self.eta_are_curve.items()},
            "estimates": {m: e.tolist() for m, e in self.estimates.items()},
            "failures": self.failures,
            "errors": self.errors,
            "settings": self.settings,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def _parse_methods(methods) -> tuple[str, ...]:
    if isinstance(methods, str):
        methods = METHODS if methods == "both" else (methods,)
    methods = tuple(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigurationError(f"methods must be drawn from {METHODS} or 'both', got {methods}")
    return methods


def run_study(
    scenario: ScenarioSpec,
    methods="both",
    settings: SNLSSettings | None = None,
    *,
    executor: Executor | None = None,
    progress: Callable[[RunOutcome], None] | None = None,
) -> AREReport:
    """Repeat generate-and-estimate ``scenario.runs`` times and summarize AREs.

    Runs are independent and may be farmed out to ``executor``; the report
    only depends on the run indices, never on completion order.
    """
    methods = _parse_methods(methods)
    job = partial(run_once, scenario, methods=methods, settings=settings)
    runs = range(scenario.runs)
    outcomes = []
    iterator = executor.map(job, runs) if executor is not None else map(job, runs)
    for out in iterator:
        outcomes.append(out)
        if progress:
            progress(out)
    outcomes.sort(key=lambda o: o.run)

    truth = np.asarray(scenario.truth)
    eta_t = np.linspace(scenario.times[0], scenario.times[-1], ETA_GRID_SIZE)
    eta_true = np.asarray(model.eta_eval(scenario.true_eta(), eta_t))
    keep = np.abs(eta_true) >= ETA_GUARD

    are, ests, curves, eta_are, failures = {}, {}, {}, {}, {}
    errors = [{"run": o.run, "method": m, "error": e} for o in outcomes for m, e in o.errors.items()]
    for m in methods:
        ok = [o for o in outcomes if o.estimates.get(m) is not None]
        failures[m] = len(outcomes) - len(ok)
        mat = np.array([o.estimates[m] for o in ok]).reshape(len(ok), 5)
        ests[m] = mat
        are[m] = {
            p: (compute_are(truth[i], mat[:, i]) if len(ok) else None) for i, p in enumerate(PARAM_NAMES)
        }
        if ok and np.any(keep):
            etas = np.array([o.eta[m] for o in ok])
            curve = np.full(eta_t.size, np.nan)
            curve[keep] = np.mean(np.abs(etas[:, keep] - eta_true[keep]) / np.abs(eta_true[keep]), axis=0) * 100
            curves[m] = curve
            eta_are[m] = float(np.nanmean(curve))
        else:
            curves[m], eta_are[m] = None, None
    return AREReport(
        scenario,
        methods,
        are,
        ests,
        curves,
        eta_are,
        eta_t,
        failures,
        errors,
        settings=(settings or SNLSSettings()).to_dict(),
    )
