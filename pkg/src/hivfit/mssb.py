"""Multistage smoothing-based (MSSB) estimation.

Stage I smooths total CD4 and viral load. Stage II regresses the smoothed
viral slope on ``(1, T, T', -V)`` and recovers ``c``, ``lambda`` and ``rho``
from the coefficients. Stage III plugs ``c`` into a linear model in
``delta``, the spline coefficients of ``eta`` and their products with
``N*delta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import bspline
from .bspline import SplineSpec
from .data import ObservationSet
from .errors import DataValidationError, EstimationError, HivFitError, SingularDesignError
from .model import PARAM_NAMES, ConstantParams, StateVector
from .smoothing import KernelSpec, SmoothEstimate, smooth_state

log = logging.getLogger(__name__)

RANGE_FACTOR = 5.0
ALPHA2_TOL = 1e-10
COEF_GUARD = 1e-12

#: Biological bounds used to clip search ranges.
GLOBAL_BOUNDS: dict[str, tuple[float, float]] = {
    "lambda": (1e-2, 1e4),
    "rho": (1e-4, 10.0),
    "N": (1.0, 1e5),
    "delta": (1e-3, 50.0),
    "c": (1e-2, 100.0),
    "eta": (1e-9, 1e-2),
    "T_U0": (1e-1, 1e5),
    "T_I0": (1e-3, 1e5),
    "V0": (1e-1, 1e9),
}


@dataclass(frozen=True, eq=False)
class PsLSResult:
    alpha0: float
    alpha1: float
    alpha2: float
    c_hat: float
    lambda_hat: float | None
    rho_hat: float | None
    residuals: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class StageThreeDesign:
    """Response ``Z = V'' + c V'`` and its regressors.

    ``u_delta = -(V' + c V)`` multiplies ``delta``; ``u_eta = -(V' V + c V^2)``
    multiplies ``eta(t)`` and ``u_neta = T V`` multiplies ``N delta eta(t)``.
    """

    z: np.ndarray
    u_delta: np.ndarray
    u_eta: np.ndarray
    u_neta: np.ndarray
    basis_matrix: np.ndarray

    def matrix(self) -> np.ndarray:
        b = self.basis_matrix
        return np.column_stack([self.u_delta, b * self.u_eta[:, None], b * self.u_neta[:, None]])


@dataclass(frozen=True, eq=False)
class StageThreeResult:
    delta_hat: float
    n_virions_hat: float | None
    eta_coeffs: np.ndarray
    n_delta_coeffs: np.ndarray
    design: StageThreeDesign
    ratios_used: int


@dataclass(frozen=True, eq=False)
class MssbEstimate:
    constants: ConstantParams
    eta_coeffs: np.ndarray
    spline_spec: SplineSpec
    search_ranges: dict[str, tuple[float, float]]
    flags: dict[str, str] = field(default_factory=dict)
    initial_state: StateVector | None = None
    psls: PsLSResult | None = None
    smooth_T: SmoothEstimate | None = None
    smooth_V: SmoothEstimate | None = None
    provenance: dict = field(default_factory=dict)

    def eta(self, t):
        return bspline.curve_eval(self.spline_spec, self.eta_coeffs, t)

    def to_dict(self) -> dict:
        return {
            "constants": {k: (v if np.isfinite(v) else None) for k, v in self.constants.as_dict().items()},
            "eta_coeffs": self.eta_coeffs.tolist(),
            "spline": self.spline_spec.to_dict(),
            "search_ranges": {k: list(v) for k, v in self.search_ranges.items()},
            "flags": dict(self.flags),
            "initial_state": None
            if self.initial_state is None
            else dict(zip(("T_U0", "T_I0", "V0"), self.initial_state.as_array().tolist())),
            "provenance": self.provenance,
        }


def _ols(design: np.ndarray, response: np.ndarray, stage: str) -> tuple[np.ndarray, np.ndarray]:
    """Least squares with column equilibration and an explicit rank check."""
    if not (np.all(np.isfinite(design)) and np.all(np.isfinite(response))):
        raise EstimationError("non-finite regression inputs", stage=stage)
    norms = np.linalg.norm(design, axis=0)
    if np.any(norms == 0):
        raise EstimationError(
            f"rank-deficient design: {int(np.sum(norms == 0))} all-zero column(s)", stage=stage
        )
    scaled = design / norms
    rank = np.linalg.matrix_rank(scaled, tol=1e-10 * np.sqrt(design.shape[0]))
    if rank < design.shape[1]:
        raise EstimationError(
            f"rank-deficient design (rank {rank} < {design.shape[1]} columns)", stage=stage
        )
    coef, *_ = np.linalg.lstsq(scaled, response, rcond=None)
    coef = coef / norms
    return coef, response - design @ coef


def stage2_psls(smooth_T: SmoothEstimate, smooth_V: SmoothEstimate) -> PsLSResult:
    """Pseudo-least-squares fit of ``V' = a0 + a1 T + a2 T' - c V``."""
    if not np.array_equal(smooth_T.eval_times, smooth_V.eval_times):
        raise EstimationError("smoothed series must share an evaluation grid", stage="stage2")
    if smooth_T.eval_times.size < 5:
        raise EstimationError("need at least 5 grid points", stage="stage2")
    n = smooth_T.eval_times.size
    design = np.column_stack([np.ones(n), smooth_T.value, smooth_T.deriv1, -smooth_V.value])
    coef, resid = _ols(design, smooth_V.deriv1, "stage2")
    a0, a1, a2, c_hat = (float(x) for x in coef)
    scale = max(abs(a0), abs(a1), abs(a2), 1.0)
    if abs(a2) <= ALPHA2_TOL * scale:
        return PsLSResult(a0, a1, a2, c_hat, None, None, resid, degenerate=True)
    return PsLSResult(a0, a1, a2, c_hat, -a0 / a2, a1 / a2, resid)


def stage3_design(smooth_T: SmoothEstimate, smooth_V: SmoothEstimate, c_hat: float, spec: SplineSpec) -> StageThreeDesign:
    V, dV, d2V = smooth_V.value, smooth_V.deriv1, smooth_V.deriv2
    T = smooth_T.value
    return StageThreeDesign(
        z=d2V + c_hat * dV,
        u_delta=-(dV + c_hat * V),
        u_eta=-(dV * V + c_hat * V**2),
        u_neta=T * V,
        basis_matrix=bspline.basis_matrix(spec, smooth_V.eval_times),
    )


def stage3_semiparametric(
    smooth_T: SmoothEstimate,
    smooth_V: SmoothEstimate,
    c_hat: float,
    spec: SplineSpec,
    delta_fixed: float | None = None,
) -> StageThreeResult:
    """Linear regression for ``delta``, ``a_j`` and ``(N delta a)_j``.

    ``N`` is the median of the per-coefficient ratios ``(N delta a)_j / a_j``
    divided by ``delta``, skipping coefficients with negligible magnitude.
    """
    if not np.isfinite(c_hat):
        raise EstimationError("c estimate is not finite", stage="stage3")
    design = stage3_design(smooth_T, smooth_V, c_hat, spec)
    s = spec.n_control
    X = design.matrix()
    z = design.z
    if delta_fixed is not None:
        z = z - delta_fixed * design.u_delta
        coef, _ = _ols(X[:, 1:], z, "stage3")
        delta_hat = float(delta_fixed)
        a, g = coef[:s], coef[s:]
    else:
        coef, _ = _ols(X, z, "stage3")
        delta_hat = float(coef[0])
        a, g = coef[1 : 1 + s], coef[1 + s :]

    keep = np.abs(a) >= COEF_GUARD * np.max(np.abs(a)) if np.any(a) else np.zeros(s, bool)
    n_hat = None
    if np.any(keep) and delta_hat != 0:
        n_hat = float(np.median(g[keep] / a[keep]) / delta_hat)
    return StageThreeResult(delta_hat, n_hat, a.copy(), g.copy(), design, int(keep.sum()))


def _range(name: str, estimate: float | None, factor: float, flags: dict) -> tuple[float, float]:
    lo_g, hi_g = GLOBAL_BOUNDS["eta" if name.startswith("a") and name[1:].isdigit() else name]
    if estimate is None or not np.isfinite(estimate) or estimate <= 0:
        flags[name] = "nonpositive-or-missing estimate; using global bounds"
        return (lo_g, hi_g)
    lo, hi = max(estimate / factor, lo_g), min(estimate * factor, hi_g)
    if lo >= hi:
        flags[name] = "estimate outside global bounds; using global bounds"
        return (lo_g, hi_g)
    return (lo, hi)


def common_grid(obs: ObservationSet) -> np.ndarray:
    """Union of observation times inside the span covered by both series."""
    lo = max(obs.t_times[0], obs.v_times[0])
    hi = min(obs.t_times[-1], obs.v_times[-1])
    grid = np.union1d(obs.t_times, obs.v_times)
    return grid[(grid >= lo) & (grid <= hi)]


def run_mssb(
    obs: ObservationSet,
    spec: SplineSpec,
    kernel: KernelSpec | None = None,
    *,
    fixed: dict[str, float] | None = None,
    range_factor: float = RANGE_FACTOR,
    t0: float | None = None,
) -> MssbEstimate:
    """Chain the three stages on raw-scale observations.

    ``fixed`` may pin ``delta`` and/or ``c`` (e.g. from an early-segment fit).
    The returned ``search_ranges`` are ``[est/f, est*f]`` clipped to
    :data:`GLOBAL_BOUNDS`.
    """
    kernel = kernel or KernelSpec()
    fixed = dict(fixed or {})
    if len(obs.t_times) < 10 or len(obs.v_times) < 10:
        raise DataValidationError(
            f"MSSB needs at least 10 points per series, got n_T={len(obs.t_times)}, n_V={len(obs.v_times)}"
        )
    grid = common_grid(obs)
    if grid.size < 5:
        raise DataValidationError("series overlap on fewer than 5 time points")
    try:
        sT = smooth_state(obs.t_times, obs.t_values, kernel, eval_times=grid)
        sV = smooth_state(obs.v_times, obs.v_values, kernel, eval_times=grid)
    except HivFitError as exc:
        raise EstimationError(str(exc), stage="stage1") from exc

    psls = stage2_psls(sT, sV)
    c_hat = float(fixed.get("c", psls.c_hat))
    lam_hat, rho_hat = psls.lambda_hat, psls.rho_hat

    st3 = stage3_semiparametric(sT, sV, c_hat, spec, delta_fixed=fixed.get("delta"))
    flags: dict[str, str] = {}
    if psls.degenerate:
        flags["stage2"] = "alpha2 ~ 0: lambda and rho not recoverable"
    if st3.n_virions_hat is None:
        flags["N"] = "no usable spline coefficient ratios"

    est = {
        "lambda": lam_hat,
        "rho": rho_hat,
        "N": st3.n_virions_hat,
        "delta": st3.delta_hat,
        "c": c_hat,
    }
    ranges = {name: _range(name, est[name], range_factor, flags) for name in PARAM_NAMES}
    for name in fixed:
        if name in ranges:
            ranges[name] = (fixed[name], fixed[name])
    for j, a in enumerate(st3.eta_coeffs, start=1):
        ranges[f"a{j}"] = _range(f"a{j}", float(a), range_factor, flags)

    constants = ConstantParams.with_missing([np.nan if est[n] is None else float(est[n]) for n in PARAM_NAMES])

    init = _initial_state_guess(obs, kernel, constants, t0 if t0 is not None else obs.t_start)
    if init is not None:
        for name, val in zip(("T_U0", "T_I0", "V0"), init.as_array()):
            ranges[name] = _range(name, val, range_factor, flags)
    else:
        for name in ("T_U0", "T_I0", "V0"):
            ranges[name] = GLOBAL_BOUNDS[name]

    provenance = {
        "method": "mssb",
        "kernel": kernel.kind,
        "bandwidth_rule": sV.bandwidth_rule,
        "bandwidths_T": list(sT.bandwidths_used),
        "bandwidths_V": list(sV.bandwidths_used),
        "n_delta_combination": "median of per-coefficient ratios",
        "psls": {"alpha0": psls.alpha0, "alpha1": psls.alpha1, "alpha2": psls.alpha2},
        "range_factor": range_factor,
        "fixed": fixed,
    }
    return MssbEstimate(constants, st3.eta_coeffs, spec, ranges, flags, init, psls, sT, sV, provenance)


def _initial_state_guess(obs, kernel, constants: ConstantParams, t0: float) -> StateVector | None:
    """Rough state at ``t0`` from local fits: ``T_I = (V' + c V) / (N delta)``."""
    try:
        sT = smooth_state(obs.t_times, obs.t_values, kernel, eval_times=[t0])
        sV = smooth_state(obs.v_times, obs.v_values, kernel, eval_times=[t0])
    except (HivFitError, np.linalg.LinAlgError):
        return None
    nd = constants.n_virions * constants.delta
    T0, V0, dV0 = float(sT.value[0]), float(sV.value[0]), float(sV.deriv1[0])
    if not (np.isfinite(nd) and nd > 0):
        return None
    ti0 = (dV0 + constants.c * V0) / nd
    tu0 = T0 - ti0
    try:
        return StateVector(tu0, ti0, V0)
    except HivFitError:
        return None
