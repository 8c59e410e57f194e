"""HIV viral-dynamics ODE system and its fixed-step RK4 solver.

State is ``(T_U, T_I, V)``: uninfected target cells, infected cells and free
virus. The infection rate ``eta`` is a function of time, either given in
closed form or as a B-spline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from . import bspline
from .bspline import SplineSpec
from .errors import ConfigurationError, DomainError, IntegrationBlowup

DEFAULT_STEP = 0.01
BLOWUP_CAP = 1e12

PARAM_NAMES = ("lambda", "rho", "N", "delta", "c")
STATE_NAMES = ("T_U", "T_I", "V")


@dataclass(frozen=True)
class StateVector:
    t_u: float
    t_i: float
    v: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in (self.t_u, self.t_i, self.v)):
            raise DomainError(f"state components must be finite: {self}")

    @property
    def total(self) -> float:
        return self.t_u + self.t_i

    def as_array(self) -> np.ndarray:
        return np.array([self.t_u, self.t_i, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "StateVector":
        t_u, t_i, v = (float(x) for x in arr)
        return cls(t_u, t_i, v)


@dataclass(frozen=True)
class ConstantParams:
    """Kinetic constants: ``lam`` is the proliferation rate (``lambda``)."""

    lam: float
    rho: float
    n_virions: float
    delta: float
    c: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in self.as_tuple()):
            raise DomainError(f"parameters must be finite: {self}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.lam, self.rho, self.n_virions, self.delta, self.c)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.as_tuple()))

    @classmethod
    def with_missing(cls, values) -> "ConstantParams":
        """Build without the finiteness check; NaN marks an unrecovered constant."""
        obj = object.__new__(cls)
        for name, v in zip(("lam", "rho", "n_virions", "delta", "c"), values):
            object.__setattr__(obj, name, float(v))
        return obj

    def missing(self) -> list[str]:
        return [n for n, v in zip(PARAM_NAMES, self.as_tuple()) if not math.isfinite(v)]

    @classmethod
    def from_sequence(cls, values) -> "ConstantParams":
        return cls(*(float(v) for v in values))

    def is_positive(self) -> bool:
        return all(x > 0 for x in self.as_tuple())


class ClosedFormEta:
    """Infection rate given by a vectorized callable on ``domain``."""

    kind = "closed-form"

    def __init__(self, func: Callable[[np.ndarray], np.ndarray], domain: tuple[float, float]):
        self.func = func
        self.domain = (float(domain[0]), float(domain[1]))

    def __call__(self, t):
        arr = np.asarray(t, dtype=float)
        _check_domain(arr, self.domain)
        out = np.asarray(self.func(arr), dtype=float)
        if not np.all(np.isfinite(out)):
            raise DomainError("infection rate evaluated to a non-finite value")
        return float(out) if out.ndim == 0 else out


class SplineEta:
    """Infection rate ``sum_j a_j b_{j,k}(t)``."""

    kind = "spline"

    def __init__(self, spec: SplineSpec, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (spec.n_control,):
            raise ConfigurationError(
                f"expected {spec.n_control} spline coefficients, got {coeffs.shape}"
            )
        self.spec = spec
        self.coeffs = coeffs
        self.domain = spec.domain

    def __call__(self, t):
        return bspline.curve_eval(self.spec, self.coeffs, t)


def _check_domain(t: np.ndarray, domain: tuple[float, float]) -> None:
    lo, hi = domain
    tol = 1e-9 * max(hi - lo, 1.0)
    if np.any(~np.isfinite(t)) or np.any(t < lo - tol) or np.any(t > hi + tol):
        raise DomainError(f"time outside infection-rate domain [{lo:g}, {hi:g}]")


def reference_eta(domain: tuple[float, float] = (0.0, 1000.0)) -> ClosedFormEta:
    """The simulation infection rate ``9e-5 * (1 - 0.9 cos(pi t / 1000))``."""
    return ClosedFormEta(lambda t: 9e-5 * (1.0 - 0.9 * np.cos(np.pi * t / 1000.0)), domain)


REFERENCE_PARAMS = ConstantParams(lam=36.0, rho=0.108, n_virions=1000.0, delta=0.5, c=3.0)
REFERENCE_INIT = StateVector(600.0, 30.0, 1e5)


def eta_eval(eta, t):
    """Evaluate an infection-rate function, enforcing its domain."""
    return eta(t)


def rhs(state, t: float, params: ConstantParams, eta) -> np.ndarray:
    """Time derivative of ``(T_U, T_I, V)``."""
    y = state.as_array() if isinstance(state, StateVector) else np.asarray(state, dtype=float)
    if y.shape != (3,) or not np.all(np.isfinite(y)):
        raise DomainError(f"state must be three finite numbers, got {y}")
    if not math.isfinite(t):
        raise DomainError("time must be finite")
    e = float(eta(t)) if callable(eta) else float(eta)
    return _rhs_arr(y, e, *params.as_tuple())


def _rhs_arr(y, e, lam, rho, n_virions, delta, c):
    t_u, t_i, v = y
    infection = e * t_u * v
    return np.array(
        [lam - rho * t_u - infection, infection - delta * t_i, n_virions * delta * t_i - c * v]
    )


@njit(cache=True)
def _rk4_kernel(y0, nodes, eta_nodes, eta_mid, lam, rho, nv, delta, c, cap):
    n = nodes.shape[0]
    out = np.empty((n, 3))
    a, b, v = y0[0], y0[1], y0[2]
    out[0, 0], out[0, 1], out[0, 2] = a, b, v
    nd = nv * delta
    for i in range(n - 1):
        h = nodes[i + 1] - nodes[i]
        e0 = eta_nodes[i]
        em = eta_mid[i]
        e1 = eta_nodes[i + 1]

        inf = e0 * a * v
        k1a = lam - rho * a - inf
        k1b = inf - delta * b
        k1v = nd * b - c * v

        a2 = a + 0.5 * h * k1a
        b2 = b + 0.5 * h * k1b
        v2 = v + 0.5 * h * k1v
        inf = em * a2 * v2
        k2a = lam - rho * a2 - inf
        k2b = inf - delta * b2
        k2v = nd * b2 - c * v2

        a3 = a + 0.5 * h * k2a
        b3 = b + 0.5 * h * k2b
        v3 = v + 0.5 * h * k2v
        inf = em * a3 * v3
        k3a = lam - rho * a3 - inf
        k3b = inf - delta * b3
        k3v = nd * b3 - c * v3

        a4 = a + h * k3a
        b4 = b + h * k3b
        v4 = v + h * k3v
        inf = e1 * a4 * v4
        k4a = lam - rho * a4 - inf
        k4b = inf - delta * b4
        k4v = nd * b4 - c * v4

        a = a + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
        b = b + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
        v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        out[i + 1, 0], out[i + 1, 1], out[i + 1, 2] = a, b, v
        # NaN fails every comparison, so test the negation
        if not (abs(a) <= cap and abs(b) <= cap and abs(v) <= cap):
            return out, i + 1
    return out, -1


class RK4Grid:
    """Precomputed fixed-step grid that lands exactly on every output time.

    Internal nodes are ``t0 + j*step``; output times falling between nodes are
    inserted as extra nodes, which shortens the neighbouring sub-steps.
    Reusing one grid across many solves (as the least-squares objective does)
    avoids rebuilding it and lets spline bases be tabulated once.
    """

    def __init__(self, output_times, step: float = DEFAULT_STEP, t0: float | None = None):
        out = np.asarray(output_times, dtype=float)
        if out.ndim != 1 or out.size == 0:
            raise ConfigurationError("output_times must be a nonempty 1-D grid")
        if not np.all(np.isfinite(out)) or np.any(np.diff(out) <= 0):
            raise ConfigurationError("output_times must be finite and strictly increasing")
        if not (step > 0 and math.isfinite(step)):
            raise ConfigurationError(f"step must be positive, got {step}")
        t0 = float(out[0]) if t0 is None else float(t0)
        if out[0] < t0:
            raise ConfigurationError("output_times must not precede the initial time")
        self.step = float(step)
        self.t0 = t0
        self.output_times = out

        n_reg = int(math.floor((out[-1] - t0) / step + 1e-9))
        regular = t0 + step * np.arange(n_reg + 1)
        # drop regular nodes that nearly coincide with an output time
        pos = np.searchsorted(out, regular)
        near = np.zeros(regular.size, dtype=bool)
        for shift in (0, -1):
            idx = np.clip(pos + shift, 0, out.size - 1)
            near |= np.abs(out[idx] - regular) < 1e-7 * step
        near[0] = False
        nodes = np.union1d(regular[~near], out)
        nodes = nodes[nodes >= t0]
        if nodes[0] != t0:
            nodes = np.concatenate([[t0], nodes])
        self.nodes = nodes
        self.mids = 0.5 * (nodes[:-1] + nodes[1:])
        self.out_index = np.searchsorted(nodes, out)

    def eta_samples(self, eta) -> tuple[np.ndarray, np.ndarray]:
        if eta is None:
            return np.zeros(self.nodes.size), np.zeros(self.mids.size)
        return (np.asarray(eta(self.nodes), dtype=float).reshape(-1),
                np.asarray(eta(self.mids), dtype=float).reshape(-1))

    def spline_tables(self, spec: SplineSpec) -> tuple[np.ndarray, np.ndarray]:
        """Basis matrices at nodes and midpoints, so that eta = B @ coeffs."""
        return bspline.basis_matrix(spec, self.nodes), bspline.basis_matrix(spec, self.mids)

    def solve_all(self, init, params, eta_nodes, eta_mid, cap: float = BLOWUP_CAP) -> np.ndarray:
        """States at every internal node; raises :class:`IntegrationBlowup`."""
        y0 = init.as_array() if isinstance(init, StateVector) else np.asarray(init, dtype=float)
        p = params.as_tuple() if isinstance(params, ConstantParams) else tuple(float(x) for x in params)
        states, fail = _rk4_kernel(
            y0, self.nodes, eta_nodes, eta_mid, p[0], p[1], p[2], p[3], p[4], float(cap)
        )
        if fail >= 0:
            raise IntegrationBlowup(self.nodes[fail], cap)
        return states

    def solve(self, init, params, eta_nodes, eta_mid, cap: float = BLOWUP_CAP) -> np.ndarray:
        """States at the output times, shape ``(n_out, 3)``."""
        return self.solve_all(init, params, eta_nodes, eta_mid, cap)[self.out_index]


@dataclass(frozen=True, eq=False)
class TrajectorySolution:
    times: np.ndarray
    states: np.ndarray
    solver_step: float

    @property
    def t_u(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def t_i(self) -> np.ndarray:
        return self.states[:, 1]

    @property
    def v(self) -> np.ndarray:
        return self.states[:, 2]

    @property
    def total(self) -> np.ndarray:
        return self.states[:, 0] + self.states[:, 1]


def integrate(
    init: StateVector,
    params: ConstantParams,
    eta,
    output_times,
    step: float = DEFAULT_STEP,
    *,
    t0: float | None = None,
    cap: float = BLOWUP_CAP,
) -> TrajectorySolution:
    """Classical RK4 solution of the HIV system reported at ``output_times``.

    The initial condition is taken at ``t0`` (default: the first output time).
    ``eta`` may be ``None`` for a zero infection rate.
    """
    grid = RK4Grid(output_times, step, t0)
    eta_n, eta_m = grid.eta_samples(eta)
    states = grid.solve(init, params, eta_n, eta_m, cap)
    return TrajectorySolution(grid.output_times.copy(), states, grid.step)
