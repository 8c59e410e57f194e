"""Local polynomial estimates of a noisy state curve and its derivatives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DataValidationError, SingularDesignError

#: Bandwidth inflation for the first and second derivative fits.
DERIV_INFLATION = {0: 1.0, 1: 1.5, 2: 2.0}
BOUNDARY_FRACTION = 0.1


def epanechnikov(z):
    z = np.asarray(z, dtype=float)
    return np.where(np.abs(z) <= 1.0, 0.75 * (1.0 - z * z), 0.0)


def biweight(z):
    z = np.asarray(z, dtype=float)
    return np.where(np.abs(z) <= 1.0, 15.0 / 16.0 * (1.0 - z * z) ** 2, 0.0)


def uniform(z):
    z = np.asarray(z, dtype=float)
    return np.where(np.abs(z) <= 1.0, 0.5, 0.0)


KERNELS: dict[str, Callable] = {
    "epanechnikov": epanechnikov,
    "biweight": biweight,
    "uniform": uniform,
}


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric kernel on [-1, 1] with a bandwidth in days.

    ``bandwidth_h=None`` asks :func:`smooth_state` to select one by
    cross-validation.
    """

    kind: str = "epanechnikov"
    bandwidth_h: float | None = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigurationError(f"unknown kernel {self.kind!r}; choose from {sorted(KERNELS)}")
        if self.bandwidth_h is not None and not (self.bandwidth_h > 0 and math.isfinite(self.bandwidth_h)):
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth_h}")

    @property
    def func(self) -> Callable:
        return KERNELS[self.kind]

    def weights(self, u, h: float):
        """``K_h(u) = K(u/h)/h``."""
        return self.func(np.asarray(u) / h) / h


@dataclass(frozen=True, eq=False)
class SmoothEstimate:
    eval_times: np.ndarray
    value: np.ndarray
    deriv1: np.ndarray
    deriv2: np.ndarray
    bandwidths_used: tuple[float, float, float]
    boundary: np.ndarray = field(default=None)
    bandwidth_rule: str = "fixed"

    def derivative(self, q: int) -> np.ndarray:
        return (self.value, self.deriv1, self.deriv2)[q]


def _validate_series(times, values) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != y.shape:
        raise DataValidationError("times and values must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise DataValidationError("times and values must be finite")
    if np.any(np.diff(t) <= 0):
        raise DataValidationError("observation times must be strictly increasing")
    return t, y


def _local_coefficients(t, y, kernel: KernelSpec, h: float, degree_p: int, eval_times, drop_self=False):
    """Local weighted LS coefficients at each eval time, shape ``(m, p+1)``.

    With ``drop_self`` the eval times must equal ``t`` and observation ``i``
    gets zero weight at eval point ``i`` (leave-one-out).
    """
    x0 = np.asarray(eval_times, dtype=float)
    d = t[None, :] - x0[:, None]  # (m, n)
    w = kernel.weights(d, h)
    if drop_self:
        np.fill_diagonal(w, 0.0)
    support = np.count_nonzero(w > 0, axis=1)
    # scale the local abscissa by h so the normal equations stay well conditioned
    ds = d / h
    powers = np.stack([ds**j for j in range(degree_p + 1)], axis=-1)  # (m, n, p+1)
    wp = powers * w[:, :, None]
    gram = np.einsum("mnj,mnk->mjk", wp, powers)
    rhs = np.einsum("mnj,n->mj", wp, y)
    bad = support < degree_p + 1
    conds = np.full(len(x0), np.inf)
    ok = ~bad
    if np.any(ok):
        conds[ok] = np.linalg.cond(gram[ok])
    bad |= ~(conds < 1e12)
    if np.any(bad):
        raise SingularDesignError(
            f"singular local design at {int(bad.sum())} eval point(s) (bandwidth {h:g}); "
            "enlarge the bandwidth",
            times=x0[bad],
        )
    coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
    return coef / h ** np.arange(degree_p + 1)


def local_poly_fit(
    obs_times,
    obs_values,
    kernel: KernelSpec,
    degree_p: int,
    deriv_order_q: int,
    eval_times,
    bandwidth: float | None = None,
) -> np.ndarray:
    """Estimate the ``q``-th derivative by a degree-``p`` local polynomial.

    The weighted least-squares coefficient of ``(t_i - t)^q`` estimates
    ``X^(q)(t)/q!`` and is rescaled by ``q!``.
    """
    if not (0 <= deriv_order_q <= degree_p):
        raise ConfigurationError(f"need 0 <= q <= p, got q={deriv_order_q}, p={degree_p}")
    h = kernel.bandwidth_h if bandwidth is None else bandwidth
    if h is None or not h > 0:
        raise ConfigurationError("a positive bandwidth is required")
    t, y = _validate_series(obs_times, obs_values)
    coef = _local_coefficients(t, y, kernel, h, degree_p, eval_times)
    return coef[:, deriv_order_q] * math.factorial(deriv_order_q)


def default_bandwidth_grid(obs_times, n_candidates: int = 25) -> np.ndarray:
    t = np.asarray(obs_times, dtype=float)
    span = t[-1] - t[0]
    gaps = np.diff(t)
    lo = 2.0 * gaps.max()
    hi = 0.5 * span
    if lo >= hi:
        return np.array([hi])
    return np.geomspace(lo, hi, n_candidates)


def cv_score(obs_times, obs_values, kernel: KernelSpec, h: float, degree_p: int = 1) -> float:
    """Leave-one-out mean squared prediction error of the local fit."""
    t, y = _validate_series(obs_times, obs_values)
    coef = _local_coefficients(t, y, kernel, h, degree_p, t, drop_self=True)
    return float(np.mean((y - coef[:, 0]) ** 2))


def select_bandwidth(
    obs_times,
    obs_values,
    degree_p: int = 1,
    deriv_order_q: int = 0,
    kernel: KernelSpec | None = None,
    candidates=None,
    inflation: dict[int, float] | None = None,
) -> float:
    """Leave-one-out CV bandwidth for the curve, inflated for derivatives.

    Candidates whose local designs are singular anywhere are skipped.
    """
    kernel = kernel or KernelSpec()
    inflation = DERIV_INFLATION if inflation is None else inflation
    t, y = _validate_series(obs_times, obs_values)
    if t.size < degree_p + 2:
        raise DataValidationError(
            f"bandwidth selection needs at least {degree_p + 2} observations, got {t.size}"
        )
    grid = default_bandwidth_grid(t) if candidates is None else np.asarray(candidates, dtype=float)
    best_h, best_score = None, math.inf
    for h in grid:
        try:
            # the curve is always selected with local linear fits
            score = cv_score(t, y, kernel, h, degree_p=1)
        except SingularDesignError:
            continue
        if best_h is None or score < best_score * (1 - 1e-12):
            best_h, best_score = float(h), score
    if best_h is None:
        raise SingularDesignError("bandwidth selection failed: every candidate is singular")
    return best_h * inflation.get(deriv_order_q, 1.0)


def smooth_state(
    obs_times,
    obs_values,
    kernel: KernelSpec | None = None,
    eval_times=None,
    bandwidths: tuple[float, float, float] | None = None,
) -> SmoothEstimate:
    """Curve, first and second derivative estimates (p = 1, 2, 3)."""
    kernel = kernel or KernelSpec()
    t, y = _validate_series(obs_times, obs_values)
    if t.size < 4:
        raise DataValidationError(f"smoothing needs at least 4 observations, got {t.size}")
    eval_times = t if eval_times is None else np.asarray(eval_times, dtype=float)

    rule = "fixed"
    if bandwidths is None:
        if kernel.bandwidth_h is not None:
            h0 = kernel.bandwidth_h
        else:
            h0 = select_bandwidth(t, y, kernel=kernel)
            rule = "loo-cv"
        bandwidths = tuple(h0 * DERIV_INFLATION[q] for q in range(3))

    if rule == "loo-cv":
        # a data-driven bandwidth may leave sparse stretches under-covered
        ests = [_widen_until_regular(t, y, kernel, h, q + 1, eval_times) for q, h in enumerate(bandwidths)]
    else:
        ests = [float(h) for h in bandwidths]
    values = [
        local_poly_fit(t, y, kernel, q + 1, q, eval_times, bandwidth=ests[q]) for q in range(3)
    ]
    span = t[-1] - t[0]
    boundary = (eval_times < t[0] + BOUNDARY_FRACTION * span) | (
        eval_times > t[-1] - BOUNDARY_FRACTION * span
    )
    return SmoothEstimate(eval_times, *values, tuple(ests), boundary, rule)


def _widen_until_regular(t, y, kernel, h, degree_p, eval_times, max_tries: int = 20) -> float:
    """Smallest ``h * 1.25**j`` whose local designs are nonsingular at every eval point."""
    last = None
    for _ in range(max_tries):
        try:
            _local_coefficients(t, y, kernel, h, degree_p, eval_times)
            return float(h)
        except SingularDesignError as exc:
            last = exc
            h *= 1.25
    raise last
