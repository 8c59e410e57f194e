"""Spline-enhanced nonlinear least squares (SNLS).

The infection rate is replaced by a B-spline so that the ODE has constant
parameters only; those and the spline coefficients (plus, optionally, the
initial state) are fitted to both observed series through the RK4 solver.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import least_squares

from . import bspline, model
from .bspline import SplineSpec
from .data import ObservationSet
from .errors import ConfigurationError, FitFailure, HivFitError
from .model import DEFAULT_STEP, PARAM_NAMES, RK4Grid
from .mssb import GLOBAL_BOUNDS, MssbEstimate, run_mssb
from .optimize import DEConfig, OptimizerSettings, OptimResult, ScatterConfig, SearchBox

log = logging.getLogger(__name__)

PENALTY = 1e12
INIT_NAMES = ("T_U0", "T_I0", "V0")
ETA_GRID_SIZE = 200
WARM_POLICIES = ("stage2", "all", "seed-only")
#: Quantities estimated in the last MSSB stage, whose ranges the default policy ignores.
_STAGE3_NAMES = ("N", "delta")


def theta_names(n_control: int, with_init: bool = True) -> tuple[str, ...]:
    names = PARAM_NAMES + tuple(f"a{j}" for j in range(1, n_control + 1))
    return names + INIT_NAMES if with_init else names


@dataclass(frozen=True, eq=False)
class ThetaVector:
    """Flat parameter vector ``(lambda, rho, N, delta, c, a_1..a_s, T_U0, T_I0, V0)``.

    Entries flagged in ``fixed`` keep their value; ``lower``/``upper`` bound
    the free ones.
    """

    names: tuple[str, ...]
    values: np.ndarray
    fixed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        n = len(self.names)
        for attr, dtype in (("values", float), ("fixed", bool), ("lower", float), ("upper", float)):
            arr = np.array(getattr(self, attr), dtype=dtype).reshape(-1)
            if arr.size != n:
                raise ConfigurationError(f"{attr} has length {arr.size}, expected {n}")
            object.__setattr__(self, attr, arr)
        free = ~self.fixed
        if np.any(self.lower[free] >= self.upper[free]):
            bad = [nm for nm, f, lo, hi in zip(self.names, free, self.lower, self.upper) if f and lo >= hi]
            raise ConfigurationError(f"empty search range for {bad}")

    @property
    def free(self) -> np.ndarray:
        return ~self.fixed

    @property
    def n_free(self) -> int:
        return int(np.count_nonzero(~self.fixed))

    @property
    def box(self) -> SearchBox:
        return SearchBox(self.lower[self.free], self.upper[self.free])

    def with_free(self, free_values) -> "ThetaVector":
        vals = self.values.copy()
        vals[self.free] = free_values
        return replace(self, values=vals)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))

    def to_dict(self) -> dict:
        return {
            name: {"value": float(v), "fixed": bool(f), "lower": float(lo), "upper": float(hi)}
            for name, v, f, lo, hi in zip(self.names, self.values, self.fixed, self.lower, self.upper)
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThetaVector":
        names = tuple(d)
        return cls(
            names,
            [d[n]["value"] for n in names],
            [d[n]["fixed"] for n in names],
            [d[n]["lower"] for n in names],
            [d[n]["upper"] for n in names],
        )


def information_criteria(rss: float, n_obs: int, k: int) -> dict[str, float | None]:
    """Gaussian-likelihood AIC, BIC and AICc written in terms of the RSS.

    AICc is ``None`` when ``n_obs - k - 1 <= 0``.
    """
    if not (rss > 0 and math.isfinite(rss)):
        raise ConfigurationError(f"information criteria need a positive finite RSS, got {rss}")
    base = n_obs * math.log(rss / n_obs)
    aic = base + 2 * k
    bic = base + k * math.log(n_obs)
    aicc = base + 2 * n_obs * k / (n_obs - k - 1) if n_obs - k - 1 > 0 else None
    return {"aic": aic, "bic": bic, "aicc": aicc}


class RSSObjective:
    """Weighted residual sum of squares of both series for a full theta.

    The RK4 grid and the spline basis tables are built once, so each call costs
    one matrix-vector product per table plus one solver pass.
    """

    def __init__(
        self,
        obs: ObservationSet,
        spec: SplineSpec,
        step: float = DEFAULT_STEP,
        t0: float | None = None,
        eta: Callable | None = None,
    ):
        self.obs = obs
        self.spec = spec
        self.step = step
        self.t0 = obs.t_start if t0 is None else float(t0)
        times = np.union1d(obs.t_times, obs.v_times)
        if times[0] < self.t0:
            raise ConfigurationError("observations precede the initial time")
        lo, hi = spec.domain
        if lo > self.t0 + 1e-9 or hi < times[-1] - 1e-9:
            raise ConfigurationError(
                f"spline domain [{lo:g}, {hi:g}] must cover [{self.t0:g}, {times[-1]:g}]"
            )
        self.grid = RK4Grid(times, step, self.t0)
        self.eta_override = eta
        if eta is None:
            self.b_nodes, self.b_mids = self.grid.spline_tables(spec)
        else:
            self.e_nodes, self.e_mids = self.grid.eta_samples(eta)
        self.t_idx = np.searchsorted(times, obs.t_times)
        self.v_idx = np.searchsorted(times, obs.v_times)
        self.y_t = _transform(obs.t_values, obs.t_scale)
        self.y_v = _transform(obs.v_values, obs.v_scale)
        self.n_control = spec.n_control

    def split(self, theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        s = self.n_control
        if theta.size != 5 + s + 3:
            raise ConfigurationError(f"theta must have {5 + s + 3} entries, got {theta.size}")
        return theta[:5], theta[5 : 5 + s], theta[5 + s :]

    def states(self, theta) -> np.ndarray:
        """Model states at the union observation grid; may raise IntegrationBlowup."""
        kin, coeffs, init = self.split(theta)
        if self.eta_override is None:
            e_n, e_m = self.b_nodes @ coeffs, self.b_mids @ coeffs
        else:
            e_n, e_m = self.e_nodes, self.e_mids
        return self.grid.solve(init, kin, e_n, e_m)

    def predictions(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Raw-scale total CD4 at ``t_times`` and viral load at ``v_times``."""
        x = self.states(theta)
        return x[self.t_idx, 0] + x[self.t_idx, 1], x[self.v_idx, 2]

    def residuals(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Residuals on the fitting scale (unweighted)."""
        T, V = self.predictions(theta)
        return self.y_t - _transform(T, self.obs.t_scale), self.y_v - _transform(V, self.obs.v_scale)

    def __call__(self, theta) -> float:
        r_t, r_v = self.residuals(theta)
        w_t, w_v = self.obs.weights
        val = w_t * float(r_t @ r_t) + w_v * float(r_v @ r_v)
        if not math.isfinite(val):
            raise FloatingPointError("non-finite residual sum of squares")
        return val


def _transform(x, scale: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if scale == "raw":
        return x
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.log10(np.where(x > 0, x, 1.0)), np.nan)


def _inverse_transform(x, scale: str) -> np.ndarray:
    return np.asarray(x, dtype=float) if scale == "raw" else 10.0 ** np.asarray(x, dtype=float)


def rss_objective(theta, obs: ObservationSet, spec: SplineSpec, step: float = DEFAULT_STEP, t0: float | None = None) -> float:
    """Penalty-free RSS at a full theta (convenience wrapper)."""
    theta = theta.values if isinstance(theta, ThetaVector) else theta
    return RSSObjective(obs, spec, step, t0)(theta)


class SearchProblem:
    """Maps optimizer coordinates to a full theta and guards the objective.

    Free parameters with a positive lower bound are searched in log10
    coordinates. Failed integrations and non-finite residuals become a
    finite penalty ``PENALTY * (1 + distance from box centre)``.
    """

    def __init__(self, objective: RSSObjective, theta: ThetaVector, log_search: bool = True):
        self.objective = objective
        self.theta = theta
        lo, hi = theta.lower[theta.free], theta.upper[theta.free]
        self.log_mask = (lo > 0) if log_search else np.zeros(lo.size, bool)
        self.box = SearchBox(self._to_search(lo), self._to_search(hi))
        self.penalty_hits = 0
        self.calls = 0

    def _to_search(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        x[self.log_mask] = np.log10(x[self.log_mask])
        return x

    def to_search(self, free_values) -> np.ndarray:
        return self.box.clip(self._to_search(free_values))

    def to_free(self, z) -> np.ndarray:
        x = np.array(z, dtype=float)
        x[self.log_mask] = 10.0 ** x[self.log_mask]
        return x

    def full(self, z) -> np.ndarray:
        vals = self.theta.values.copy()
        vals[self.theta.free] = self.to_free(z)
        return vals

    def _penalty(self, z) -> float:
        self.penalty_hits += 1
        return PENALTY * (1.0 + float(np.linalg.norm(self.box.normalize(z) - 0.5)))

    def __call__(self, z) -> float:
        self.calls += 1
        try:
            return self.objective(self.full(z))
        except (HivFitError, FloatingPointError, ArithmeticError):
            return self._penalty(z)

    def residual_vector(self, z) -> np.ndarray:
        """Weighted residuals whose squared norm equals ``self(z)``."""
        self.calls += 1
        w_t, w_v = self.objective.obs.weights
        try:
            r_t, r_v = self.objective.residuals(self.full(z))
            r = np.concatenate([math.sqrt(w_t) * r_t, math.sqrt(w_v) * r_v])
            if np.all(np.isfinite(r)):
                return r
        except (HivFitError, FloatingPointError, ArithmeticError):
            pass
        m = self.objective.obs.n_total
        return np.full(m, math.sqrt(self._penalty(z) / m))

    def refine(self, start, box: SearchBox, budget: int) -> OptimResult:
        """Trust-region reflective least squares on the residual vector.

        ``budget`` bounds residual evaluations including the forward-difference
        Jacobians. Never returns a point worse than ``start``.
        """
        z0 = np.asarray(start, dtype=float)
        calls0 = self.calls
        f0 = self(z0)
        max_nfev = max(1, budget // (box.dim + 1))
        try:
            res = least_squares(
                self.residual_vector,
                box.clip(z0),
                bounds=(box.lower, box.upper),
                method="trf",
                x_scale="jac",
                max_nfev=max_nfev,
            )
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("least-squares refinement aborted: %s", exc)
            return OptimResult(z0.copy(), f0, self.calls - calls0, [f0], "no-improvement")
        z = box.clip(res.x)
        fz = self(z)
        used = self.calls - calls0
        if not fz < f0:
            return OptimResult(z0.copy(), f0, used, [f0], "no-improvement")
        reason = "converged" if res.status > 0 else "budget"
        return OptimResult(z, fz, used, [f0, fz], reason)


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: ThetaVector
    rss: float
    aic: float | None
    bic: float | None
    aicc: float | None
    n_obs: int
    k_free: int
    spec: SplineSpec
    t0: float
    fitted_T: np.ndarray
    fitted_V: np.ndarray
    eta_times: np.ndarray
    eta_curve: np.ndarray
    residuals_T: np.ndarray
    residuals_V: np.ndarray
    trace: list[float] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def constants(self) -> dict[str, float]:
        d = self.theta_hat.as_dict()
        return {n: d[n] for n in PARAM_NAMES}

    @property
    def eta_coeffs(self) -> np.ndarray:
        return self.theta_hat.values[5 : 5 + self.spec.n_control]

    def to_dict(self) -> dict:
        return {
            "method": self.provenance.get("method", "snls"),
            "theta": self.theta_hat.to_dict(),
            "estimates": self.theta_hat.as_dict(),
            "rss": self.rss,
            "aic": self.aic,
            "bic": self.bic,
            "aicc": self.aicc,
            "n_obs": self.n_obs,
            "k_free": self.k_free,
            "spline": self.spec.to_dict(),
            "t0": self.t0,
            "fitted_T": self.fitted_T.tolist(),
            "fitted_V": self.fitted_V.tolist(),
            "eta_times": self.eta_times.tolist(),
            "eta_curve": self.eta_curve.tolist(),
            "residuals_T": self.residuals_T.tolist(),
            "residuals_V": self.residuals_V.tolist(),
            "trace": [float(x) for x in self.trace],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        return cls(
            theta_hat=ThetaVector.from_dict(d["theta"]),
            rss=d["rss"],
            aic=d["aic"],
            bic=d["bic"],
            aicc=d["aicc"],
            n_obs=d["n_obs"],
            k_free=d["k_free"],
            spec=SplineSpec.from_dict(d["spline"]),
            t0=d["t0"],
            fitted_T=np.asarray(d["fitted_T"]),
            fitted_V=np.asarray(d["fitted_V"]),
            eta_times=np.asarray(d["eta_times"]),
            eta_curve=np.asarray(d["eta_curve"]),
            residuals_T=np.asarray(d["residuals_T"]),
            residuals_V=np.asarray(d["residuals_V"]),
            trace=list(d.get("trace", [])),
            provenance=dict(d.get("provenance", {})),
        )


def default_optimizer(seed: int = 0) -> OptimizerSettings:
    """Hybrid schedule tuned for the ODE fits: short DE epochs, many polishes."""
    return OptimizerSettings(
        de=DEConfig(max_generations=400, seed=seed),
        scatter=ScatterConfig(seed=seed),
        refine_budget=2000,
        epochs=4,
        refine_starts=8,
        seed=seed,
    )


@dataclass(frozen=True)
class SNLSSettings:
    step: float = DEFAULT_STEP
    optimizer: OptimizerSettings = field(default_factory=default_optimizer)
    log_search: bool = True
    range_factor: float = 5.0
    #: "stage2" trusts MSSB ranges only for lambda, rho, c and the initial
    #: state; "all" uses every MSSB range; "seed-only" keeps global bounds and
    #: uses the MSSB point merely as a starting point.
    warm_policy: str = "seed-only"
    #: refits allowed after reopening MSSB ranges the optimum ended up on
    max_expansions: int = 2

    def __post_init__(self):
        if self.warm_policy not in WARM_POLICIES:
            raise ConfigurationError(f"warm_policy must be one of {WARM_POLICIES}, got {self.warm_policy!r}")
        if not (self.step > 0 and self.range_factor > 1):
            raise ConfigurationError("step must be positive and range_factor above 1")

    def with_seed(self, seed: int) -> "SNLSSettings":
        return replace(self, optimizer=replace(self.optimizer, seed=int(seed)))

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.to_dict(),
            "log_search": self.log_search,
            "range_factor": self.range_factor,
            "warm_policy": self.warm_policy,
            "max_expansions": self.max_expansions,
            "integrator": "classical RK4, fixed step, sub-steps shortened to hit output times",
            "local_refiner": "trust-region reflective least squares on the residual vector (stands in for SQP)",
        }


def build_theta(
    spec: SplineSpec,
    ranges: Mapping[str, tuple[float, float]],
    start: Mapping[str, float] | None = None,
    fixed: Mapping[str, float] | None = None,
) -> ThetaVector:
    """Assemble a :class:`ThetaVector`; parameters without a range use global bounds."""
    names = theta_names(spec.n_control)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown fixed parameter(s): {sorted(unknown)}")
    start = dict(start or {})
    vals, mask, lo, hi = [], [], [], []
    for name in names:
        g = GLOBAL_BOUNDS["eta" if _is_coef(name) else name]
        low, high = ranges.get(name, g)
        if name in fixed:
            v = float(fixed[name])
            vals.append(v)
            mask.append(True)
            lo.append(min(low, v))
            hi.append(max(high, v))
            continue
        if not low < high:
            low, high = g
        v = start.get(name, math.sqrt(low * high) if low > 0 else 0.5 * (low + high))
        vals.append(float(np.clip(v, low, high)))
        mask.append(False)
        lo.append(low)
        hi.append(high)
    return ThetaVector(names, vals, mask, lo, hi)


def warm_ranges(warm, policy: str = "all") -> tuple[dict, dict]:
    """Search ranges and start values from an MSSB estimate or a plain mapping.

    With ``policy="stage2"`` the ranges MSSB derives for ``N``, ``delta`` and
    the spline coefficients are dropped, so those fall back to global bounds.
    """
    if warm is None:
        return {}, {}
    if isinstance(warm, MssbEstimate):
        start = {n: v for n, v in warm.constants.as_dict().items() if np.isfinite(v) and v > 0}
        for j, a in enumerate(warm.eta_coeffs, start=1):
            if a > 0:
                start[f"a{j}"] = float(a)
        if warm.initial_state is not None:
            for n, v in zip(INIT_NAMES, warm.initial_state.as_array()):
                if v > 0:
                    start[n] = float(v)
        ranges = dict(warm.search_ranges)
        if policy == "seed-only":
            ranges = {}
        elif policy == "stage2":
            ranges = {k: v for k, v in ranges.items() if k not in _STAGE3_NAMES and not _is_coef(k)}
        return ranges, start
    if isinstance(warm, Mapping):
        return {k: tuple(v) for k, v in warm.items()}, {}
    raise ConfigurationError(f"unsupported warm start of type {type(warm).__name__}")


def _is_coef(name: str) -> bool:
    return name.startswith("a") and name[1:].isdigit()


def fit_snls(
    obs: ObservationSet,
    spec: SplineSpec,
    warm=None,
    settings: SNLSSettings | None = None,
    *,
    fixed: Mapping[str, float] | None = None,
    t0: float | None = None,
    start: Mapping[str, float] | None = None,
    eta_grid_size: int = ETA_GRID_SIZE,
) -> FitResult:
    """Minimize the RSS over all free parameters with the hybrid optimizer.

    ``warm`` is an :class:`MssbEstimate` or a mapping ``name -> (low, high)``;
    ``fixed`` pins parameters (initial states ``T_U0``, ``T_I0``, ``V0``
    included) at given values.
    """
    settings = settings or SNLSSettings()
    ranges, warm_start = warm_ranges(warm, settings.warm_policy)
    if start:
        warm_start.update(start)
    theta0 = build_theta(spec, ranges, warm_start, fixed)
    objective = RSSObjective(obs, spec, settings.step, t0)

    if theta0.n_free == 0:
        best = theta0
        try:
            rss = objective(best.values)
        except (HivFitError, FloatingPointError) as exc:
            raise FitFailure(f"fixed parameters do not integrate: {exc}") from exc
        trace, opt_info = [], {"evaluations": 1, "termination": "no-free-parameters", "penalty_fraction": 0.0}
        return _assemble(obs, spec, objective, best, rss, trace, settings, opt_info, eta_grid_size)

    best, res, frac = _search(objective, theta0, settings, [theta0.values[theta0.free]])
    evaluations, expanded = res.evaluations_used, []
    rounds = settings.max_expansions if isinstance(warm, MssbEstimate) else 0
    for _ in range(rounds):
        hit = _bound_hits(best)
        if not hit:
            break
        # the optimum sits on a range derived from MSSB: reopen those ranges
        expanded.extend(hit)
        ranges = {**ranges, **{n: GLOBAL_BOUNDS[_bounds_key(n)] for n in hit}}
        theta0 = build_theta(spec, ranges, best.as_dict(), fixed)
        seeds = [best.values[best.free], theta0.values[theta0.free]]
        new_best, res, frac = _search(objective, theta0, settings, seeds)
        evaluations += res.evaluations_used
        if objective(new_best.values) <= objective(best.values):
            best = new_best
        else:
            best = replace(best, lower=theta0.lower, upper=theta0.upper)
    rss = objective(best.values)
    trace = res.trace
    opt_info = {
        "evaluations": evaluations,
        "termination": res.termination_reason,
        "penalty_fraction": frac,
        "expanded_ranges": sorted(set(expanded)),
    }
    return _assemble(obs, spec, objective, best, rss, trace, settings, opt_info, eta_grid_size)


def _bounds_key(name: str) -> str:
    return "eta" if _is_coef(name) else name


def _bound_hits(theta: ThetaVector, tol: float = 1e-4) -> list[str]:
    """Free parameters resting on a bound narrower than the global one."""
    hits = []
    for name, v, free, lo, hi in zip(theta.names, theta.values, theta.free, theta.lower, theta.upper):
        if not free:
            continue
        g_lo, g_hi = GLOBAL_BOUNDS[_bounds_key(name)]
        if lo > 0:
            u = (math.log10(v) - math.log10(lo)) / (math.log10(hi) - math.log10(lo))
        else:
            u = (v - lo) / (hi - lo)
        if (u < tol and lo > g_lo * (1 + 1e-12)) or (u > 1 - tol and hi < g_hi * (1 - 1e-12)):
            hits.append(name)
    return hits


def _search(objective: RSSObjective, theta0: ThetaVector, settings: SNLSSettings, seeds):
    """Hybrid search over the free coordinates; seeds are polished first."""
    problem = SearchProblem(objective, theta0, settings.log_search)
    z_seeds = [problem.to_search(x) for x in seeds]
    if settings.optimizer.refine_budget > 0:
        z_seeds.append(problem.refine(z_seeds[0], problem.box, settings.optimizer.refine_budget).best_point)
    res = settings.optimizer.minimize(
        problem, problem.box, refiner=problem.refine, initial_points=np.array(z_seeds)
    )
    frac = problem.penalty_hits / max(problem.calls, 1)
    if res.best_value >= PENALTY:
        raise FitFailure(f"no penalty-free evaluation found ({100 * frac:.1f}% of evaluations penalized)")
    return theta0.with_free(problem.to_free(res.best_point)), res, frac


def _assemble(obs, spec, objective, theta, rss, trace, settings, opt_info, eta_grid_size) -> FitResult:
    T, V = objective.predictions(theta.values)
    r_t, r_v = objective.residuals(theta.values)
    n_obs = obs.n_total
    k = theta.n_free
    if rss > 0:
        crit = information_criteria(rss, n_obs, k)
    else:
        crit = {"aic": None, "bic": None, "aicc": None}
    eta_t = np.linspace(obs.t_start, obs.t_end, eta_grid_size)
    eta = bspline.curve_eval(spec, theta.values[5 : 5 + spec.n_control], eta_t)
    provenance = {
        "method": "snls",
        "seed": settings.optimizer.seed,
        "settings": settings.to_dict(),
        "spline": spec.to_dict(),
        "scales": {"cd4": obs.t_scale, "viral_load": obs.v_scale},
        "weights": list(obs.weights),
        "optimizer": opt_info,
        "k_counts": "free parameters only",
    }
    return FitResult(
        theta_hat=theta,
        rss=float(rss),
        aic=crit["aic"],
        bic=crit["bic"],
        aicc=crit["aicc"],
        n_obs=n_obs,
        k_free=k,
        spec=spec,
        t0=objective.t0,
        fitted_T=T,
        fitted_V=V,
        eta_times=eta_t,
        eta_curve=np.asarray(eta),
        residuals_T=r_t,
        residuals_V=r_v,
        trace=list(trace),
        provenance=provenance,
    )


def fit_combined(
    obs: ObservationSet,
    spec: SplineSpec,
    settings: SNLSSettings | None = None,
    *,
    fixed: Mapping[str, float] | None = None,
    t0: float | None = None,
    kernel=None,
) -> tuple[MssbEstimate, FitResult]:
    """MSSB for search ranges, then SNLS to refine.

    MSSB always runs on raw-scale values; SNLS uses the observation scales.
    """
    settings = settings or SNLSSettings()
    fixed = dict(fixed or {})
    mssb_fixed = {k: v for k, v in fixed.items() if k in ("delta", "c")}
    t0 = obs.t_start if t0 is None else t0
    est = run_mssb(obs, spec, kernel, fixed=mssb_fixed, range_factor=settings.range_factor, t0=t0)
    fit = fit_snls(obs, spec, est, settings, fixed=fixed, t0=t0)
    fit.provenance["method"] = "combined"
    fit.provenance["mssb"] = est.to_dict()
    return est, fit


def fitted_trajectory(fit: FitResult, times, step: float | None = None) -> model.TrajectorySolution:
    """Integrate the fitted model and report it at ``times`` (all >= ``fit.t0``)."""
    theta = fit.theta_hat.values
    s = fit.spec.n_control
    step = fit.provenance.get("settings", {}).get("step", DEFAULT_STEP) if step is None else step
    return model.integrate(
        model.StateVector(*theta[5 + s :]),
        model.ConstantParams(*theta[:5]),
        model.SplineEta(fit.spec, theta[5 : 5 + s]),
        times,
        step,
        t0=fit.t0,
    )


# -- model selection --------------------------------------------------------


@dataclass
class CandidateScore:
    model: int
    order_k: int
    n_control: int
    available: bool
    aic: float | None = None
    bic: float | None = None
    aicc: float | None = None
    rss: float | None = None
    k_free: int | None = None
    note: str = ""
    fit: FitResult | None = None

    def row(self) -> dict:
        return {
            "Model": self.model,
            "order": self.order_k,
            "control points": self.n_control,
            "AIC": self.aic,
            "BIC": self.bic,
            "AICc": self.aicc,
        }


@dataclass
class SelectionResult:
    candidates: list[CandidateScore]
    best: FitResult

    def ranked(self) -> list[CandidateScore]:
        ok = [c for c in self.candidates if c.available and c.aicc is not None]
        return sorted(ok, key=lambda c: c.aicc)

    @property
    def best_label(self) -> tuple[int, int]:
        return self.best.spec.order_k, self.best.spec.n_control


def default_grid() -> list[tuple[int, int]]:
    grid = [(2, s) for s in (3, 4, 5)]
    grid += [(k, s) for k in (3, 4) for s in range(3, 11)]
    return grid


def select_model(
    obs: ObservationSet,
    grid=None,
    warm=None,
    settings: SNLSSettings | None = None,
    *,
    spacing: str = "log",
    fixed: Mapping[str, float] | None = None,
    t0: float | None = None,
    kernel=None,
) -> SelectionResult:
    """Fit every ``(order, n_control)`` candidate and rank by AICc.

    ``warm`` may be ``None`` (run MSSB per candidate), a mapping of ranges, or a
    callable ``spec -> warm``. Candidates with ``s < k`` or ``N - K - 1 <= 0``
    are reported as unavailable.
    """
    settings = settings or SNLSSettings()
    grid = list(default_grid() if grid is None else grid)
    if not grid:
        raise ConfigurationError("empty model grid")
    t0 = obs.t_start if t0 is None else float(t0)
    domain = (t0, obs.t_end)
    fixed = dict(fixed or {})
    scores: list[CandidateScore] = []
    for idx, (k, s) in enumerate(grid, start=1):
        if s < k:
            scores.append(CandidateScore(idx, k, s, False, note="s < k"))
            continue
        k_free = 5 + s + 3 - len(fixed)
        if obs.n_total - k_free - 1 <= 0:
            scores.append(CandidateScore(idx, k, s, False, note="N - K - 1 <= 0"))
            continue
        spec = bspline.make_spec(k, s, domain, spacing)
        try:
            if warm is None:
                mssb_fixed = {n: v for n, v in fixed.items() if n in ("delta", "c")}
                w = run_mssb(obs, spec, kernel, fixed=mssb_fixed, range_factor=settings.range_factor, t0=t0)
            elif callable(warm):
                w = warm(spec)
            else:
                w = warm
            fit = fit_snls(obs, spec, w, settings, fixed=fixed, t0=t0)
        except HivFitError as exc:
            log.warning("candidate (%d, %d) failed: %s", k, s, exc)
            scores.append(CandidateScore(idx, k, s, False, note=f"fit failed: {exc}"))
            continue
        scores.append(
            CandidateScore(idx, k, s, fit.aicc is not None, fit.aic, fit.bic, fit.aicc, fit.rss, fit.k_free, fit=fit)
        )
    ok = [c for c in scores if c.available and c.aicc is not None]
    if not ok:
        raise FitFailure("model selection failed: no candidate could be fitted")
    best = min(ok, key=lambda c: c.aicc)
    return SelectionResult(scores, best.fit)


# -- bootstrap ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    names: tuple[str, ...]
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    eta_times: np.ndarray
    eta_lower: np.ndarray
    eta_upper: np.ndarray
    B: int
    seed: int
    dropped: int
    unreliable: bool
    sanity_ok: bool

    def intervals(self) -> dict[str, tuple[float, float]]:
        return {n: (float(lo), float(hi)) for n, lo, hi in zip(self.names, self.lower, self.upper)}

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "dropped": self.dropped,
            "unreliable": self.unreliable,
            "sanity_ok": self.sanity_ok,
            "level": 0.95,
            "intervals": {
                n: {"estimate": float(p), "lo95": float(lo), "hi95": float(hi)}
                for n, p, lo, hi in zip(self.names, self.point, self.lower, self.upper)
            },
            "replicates": self.replicates.tolist(),
        }


def bootstrap_ci(
    obs: ObservationSet,
    best: FitResult,
    B: int = 100,
    seed: int = 0,
    settings: SNLSSettings | None = None,
    *,
    refit: str = "local",
    refine_budget: int = 3000,
) -> BootstrapResult:
    """Residual bootstrap percentile intervals for the free parameters and eta.

    Centered residuals of each series (on its fitting scale) are resampled with
    replacement and added back to the fitted curves. Each replicate is refitted
    from the original estimate, by local refinement (``refit="local"``) or a
    full hybrid search (``refit="hybrid"``).
    """
    if B < 2:
        raise ConfigurationError(f"bootstrap needs B >= 2 replicates, got {B}")
    if refit not in ("local", "hybrid"):
        raise ConfigurationError(f"refit must be 'local' or 'hybrid', got {refit!r}")
    settings = settings or SNLSSettings(step=best.provenance.get("settings", {}).get("step", DEFAULT_STEP))
    theta = best.theta_hat
    free_names = tuple(n for n, f in zip(theta.names, theta.free) if f)
    point = theta.values[theta.free]
    spec = best.spec

    fit_t = _transform(best.fitted_T, obs.t_scale)
    fit_v = _transform(best.fitted_V, obs.v_scale)
    res_t = best.residuals_T - best.residuals_T.mean()
    res_v = best.residuals_V - best.residuals_V.mean()

    children = np.random.SeedSequence(seed).spawn(B)
    reps, etas = [], []
    dropped = 0
    for b, child in enumerate(children):
        rng = np.random.default_rng(child)
        y_t = fit_t + rng.choice(res_t, size=res_t.size, replace=True)
        y_v = fit_v + rng.choice(res_v, size=res_v.size, replace=True)
        boot = obs.with_values(_inverse_transform(y_t, obs.t_scale), _inverse_transform(y_v, obs.v_scale))
        try:
            objective = RSSObjective(boot, spec, settings.step, best.t0)
            problem = SearchProblem(objective, theta, settings.log_search)
            z0 = problem.to_search(point)
            if refit == "local":
                res = problem.refine(z0, problem.box, refine_budget)
            else:
                opt = settings.with_seed(int(child.generate_state(1)[0])).optimizer
                res = opt.minimize(problem, problem.box, refiner=problem.refine)
            if not res.best_value < PENALTY:
                raise FitFailure("replicate landed in the penalty region")
        except HivFitError as exc:
            log.debug("bootstrap replicate %d dropped: %s", b, exc)
            dropped += 1
            continue
        free_vals = problem.to_free(res.best_point)
        reps.append(free_vals)
        full = theta.with_free(free_vals).values
        etas.append(bspline.curve_eval(spec, full[5 : 5 + spec.n_control], best.eta_times))

    if not reps:
        raise FitFailure("every bootstrap replicate failed")
    reps = np.array(reps)
    etas = np.array(etas)
    lo, hi = np.percentile(reps, [2.5, 97.5], axis=0)
    e_lo, e_hi = np.percentile(etas, [2.5, 97.5], axis=0)
    inside = np.mean((lo <= point + 1e-12 * np.abs(point)) & (point <= hi + 1e-12 * np.abs(point)))
    return BootstrapResult(
        names=free_names,
        point=point.copy(),
        lower=lo,
        upper=hi,
        replicates=reps,
        eta_times=best.eta_times.copy(),
        eta_lower=e_lo,
        eta_upper=e_hi,
        B=B,
        seed=seed,
        dropped=dropped,
        unreliable=dropped > 0.2 * B,
        sanity_ok=bool(inside >= 0.9),
    )
