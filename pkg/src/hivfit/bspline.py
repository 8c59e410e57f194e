"""B-spline bases for the time-varying infection rate.

Splines are parameterized by their control-point abscissae. The clamped knot
vector is derived from those positions by knot averaging, so a user only ever
picks an order ``k`` and a control-point count ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigurationError, DomainError

Spacing = Literal["log", "linear"]

#: Shift (days) applied before taking logs so that t=0 stays in the domain.
LOG_SHIFT = 1.0

_EDGE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SplineSpec:
    """Order, control positions and clamped knot vector of a B-spline basis."""

    order_k: int
    n_control: int
    control_positions: np.ndarray
    knots: np.ndarray
    domain: tuple[float, float]
    spacing: str = "log"

    def __post_init__(self):
        if self.order_k < 2:
            raise ConfigurationError(f"spline order must be >= 2, got {self.order_k}")
        if self.n_control < self.order_k:
            raise ConfigurationError(
                f"need n_control >= order_k, got s={self.n_control} < k={self.order_k}"
            )
        if len(self.knots) != self.n_control + self.order_k:
            raise ConfigurationError("knot vector length must equal n_control + order_k")
        if np.any(np.diff(self.knots) < 0):
            raise ConfigurationError("knot vector must be nondecreasing")
        for name in ("control_positions", "knots"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def label(self) -> str:
        return f"order{self.order_k}_s{self.n_control}"

    def to_dict(self) -> dict:
        return {
            "order_k": self.order_k,
            "n_control": self.n_control,
            "spacing": self.spacing,
            "domain": list(self.domain),
            "control_positions": self.control_positions.tolist(),
            "knots": self.knots.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineSpec":
        return make_spec(d["order_k"], d["n_control"], tuple(d["domain"]), d.get("spacing", "log"))


def control_points(n_control: int, domain: tuple[float, float], spacing: Spacing = "log") -> np.ndarray:
    t_min, t_max = map(float, domain)
    if spacing == "linear":
        return np.linspace(t_min, t_max, n_control)
    if spacing == "log":
        if t_min + LOG_SHIFT <= 0:
            raise ConfigurationError("log spacing requires t_min > -1 day")
        grid = np.linspace(np.log(t_min + LOG_SHIFT), np.log(t_max + LOG_SHIFT), n_control)
        pts = np.exp(grid) - LOG_SHIFT
        pts[0], pts[-1] = t_min, t_max
        return pts
    raise ConfigurationError(f"unknown spacing {spacing!r}")


def average_knots(positions: np.ndarray, order_k: int) -> np.ndarray:
    """Clamped knot vector whose interior knots are running means of ``k-1`` positions."""
    tau = np.asarray(positions, dtype=float)
    s = len(tau)
    interior = [tau[j : j + order_k - 1].mean() for j in range(1, s - order_k + 1)]
    return np.concatenate([np.full(order_k, tau[0]), interior, np.full(order_k, tau[-1])])


def make_spec(
    order_k: int,
    n_control: int,
    domain: tuple[float, float],
    spacing: Spacing = "log",
) -> SplineSpec:
    """Build a :class:`SplineSpec` with control points spread over ``domain``.

    >>> make_spec(2, 3, (0.0, 20.0), "linear").knots.tolist()
    [0.0, 0.0, 10.0, 20.0, 20.0]
    """
    order_k, n_control = int(order_k), int(n_control)
    if order_k not in (2, 3, 4):
        raise ConfigurationError(f"spline order must be 2, 3 or 4, got {order_k}")
    if n_control < order_k:
        raise ConfigurationError(
            f"need n_control >= order_k, got s={n_control} < k={order_k}"
        )
    t_min, t_max = map(float, domain)
    if not (np.isfinite(t_min) and np.isfinite(t_max) and t_max > t_min):
        raise ConfigurationError(f"domain must have positive length, got {domain}")
    pos = control_points(n_control, (t_min, t_max), spacing)
    knots = average_knots(pos, order_k)
    return SplineSpec(order_k, n_control, pos, knots, (t_min, t_max), spacing)


def basis_matrix(spec: SplineSpec, t) -> np.ndarray:
    """Evaluate all basis functions at each time in ``t``.

    Returns an array of shape ``(len(t), n_control)``. Uses the Cox-de Boor
    recurrence with the right domain endpoint folded into the last interval.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = spec.domain
    span = hi - lo
    if np.any(~np.isfinite(t)) or np.any(t < lo - _EDGE_TOL * span) or np.any(t > hi + _EDGE_TOL * span):
        bad = t[~((t >= lo - _EDGE_TOL * span) & (t <= hi + _EDGE_TOL * span))]
        raise DomainError(f"spline evaluated outside its domain [{lo:g}, {hi:g}]: {bad[:5]}")
    t = np.clip(t, lo, hi)
    knots = spec.knots
    k = spec.order_k
    n_knots = len(knots)

    # order-1 (piecewise constant) functions on [knots[i], knots[i+1])
    last = np.max(np.nonzero(knots < hi)[0])
    b = np.zeros((t.size, n_knots - 1))
    for i in range(n_knots - 1):
        if knots[i] < knots[i + 1]:
            if i == last:
                b[:, i] = (t >= knots[i]) & (t <= knots[i + 1])
            else:
                b[:, i] = (t >= knots[i]) & (t < knots[i + 1])

    for order in range(2, k + 1):
        nxt = np.zeros((t.size, n_knots - order))
        for i in range(n_knots - order):
            den_l = knots[i + order - 1] - knots[i]
            den_r = knots[i + order] - knots[i + 1]
            if den_l > 0:
                nxt[:, i] += (t - knots[i]) / den_l * b[:, i]
            if den_r > 0:
                nxt[:, i] += (knots[i + order] - t) / den_r * b[:, i + 1]
        b = nxt
    return b


def basis_eval(spec: SplineSpec, t: float) -> np.ndarray:
    """Vector of the ``s`` basis values at a single time."""
    return basis_matrix(spec, [t])[0]


def curve_eval(spec: SplineSpec, coeffs, t):
    """Evaluate ``sum_j coeffs[j] * b_j(t)``; scalar in, scalar out."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (spec.n_control,):
        raise ConfigurationError(
            f"expected {spec.n_control} spline coefficients, got shape {coeffs.shape}"
        )
    values = basis_matrix(spec, t) @ coeffs
    return float(values[0]) if np.ndim(t) == 0 else values
