"""Box-constrained global minimization.

Differential evolution, scatter search driven by a segment-visit history,
a finite-difference quasi-Newton refiner, and a hybrid that interleaves the
three. Every routine is deterministic for a given seed: random draws happen
in a fixed order and objective batches are reduced in index order, so an
``executor`` with a ``map`` method can evaluate a batch in parallel without
changing results.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigurationError

Objective = Callable[[np.ndarray], float]


@dataclass(frozen=True, eq=False)
class SearchBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or lo.size == 0:
            raise ConfigurationError("lower and upper bounds must be nonempty vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigurationError("bounds must be finite")
        if np.any(lo >= hi):
            raise ConfigurationError(f"need lower < upper componentwise (dims {np.nonzero(lo >= hi)[0].tolist()})")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def reflect(self, x) -> np.ndarray:
        """Mirror components that left the box back through the violated face."""
        x = np.array(x, dtype=float)
        lo, hi = self.lower, self.upper
        below = x < lo
        x[below] = 2 * lo[below] - x[below]
        above = x > hi
        x[above] = 2 * hi[above] - x[above]
        return np.clip(x, lo, hi)

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / self.width

    def denormalize(self, u) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * self.width

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + rng.random((n, self.dim)) * self.width


@dataclass(frozen=True)
class DEConfig:
    population_size: int | None = None
    amplification: float = 0.8
    crossover_ratio: float = 0.9
    max_generations: int = 800
    seed: int = 0

    def __post_init__(self):
        if self.population_size is not None and self.population_size < 4:
            raise ConfigurationError("DE needs a population of at least 4")
        if not self.amplification > 0:
            raise ConfigurationError("amplification factor F must be positive")
        if not 0.0 <= self.crossover_ratio <= 1.0:
            raise ConfigurationError("crossover ratio must lie in [0, 1]")

    def pop_size(self, dim: int) -> int:
        return self.population_size or max(40, 10 * dim)


@dataclass(frozen=True)
class ScatterConfig:
    segments: int = 4
    first_population: int | None = None
    elite_count: int = 20
    max_iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.segments < 1:
            raise ConfigurationError("need at least one segment per dimension")
        if self.elite_count < 2 or self.elite_count % 2:
            raise ConfigurationError("elite count must be even and >= 2")
        if self.first_population is not None and self.first_population < self.segments:
            raise ConfigurationError("first population must hold at least one vector per segment")

    def n_first(self, dim: int) -> int:
        return max(self.first_population or 10 * dim, self.segments, self.elite_count)


@dataclass
class OptimResult:
    best_point: np.ndarray
    best_value: float
    evaluations_used: int
    trace: list[float] = field(default_factory=list)
    termination_reason: str = ""


class _Counter:
    """Objective wrapper that counts evaluations and evaluates batches."""

    def __init__(self, objective: Objective, executor=None):
        self.objective = objective
        self.executor = executor
        self.count = 0

    def __call__(self, x) -> float:
        self.count += 1
        return float(self.objective(np.asarray(x, dtype=float)))

    def batch(self, xs) -> np.ndarray:
        xs = [np.asarray(x, dtype=float) for x in xs]
        self.count += len(xs)
        mapper = map if self.executor is None else self.executor.map
        return np.array([float(v) for v in mapper(self.objective, xs)])


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- differential evolution ------------------------------------------------


def mutation_indices(rng: np.random.Generator, n_pop: int, i: int) -> tuple[int, int, int]:
    """Three distinct population indices, all different from ``i``."""
    choices = rng.choice(n_pop - 1, size=3, replace=False)
    r = [int(c) + (c >= i) for c in choices]
    return r[0], r[1], r[2]


def de_mutant(x_r1, x_r2, x_r3, amplification: float) -> np.ndarray:
    """``x_r1 + F (x_r2 - x_r3)``."""
    return np.asarray(x_r1) + amplification * (np.asarray(x_r2) - np.asarray(x_r3))


def _de_generation(pop, fit, box, cfg, rng, counter):
    n_pop, dim = pop.shape
    trials = np.empty_like(pop)
    for i in range(n_pop):
        r1, r2, r3 = mutation_indices(rng, n_pop, i)
        v = box.reflect(de_mutant(pop[r1], pop[r2], pop[r3], cfg.amplification))
        cross = rng.random(dim) <= cfg.crossover_ratio
        cross[rng.integers(dim)] = True
        trials[i] = np.where(cross, v, pop[i])
    tfit = counter.batch(trials)
    better = tfit <= fit
    pop = np.where(better[:, None], trials, pop)
    fit = np.where(better, tfit, fit)
    return pop, fit


def de_minimize(
    objective: Objective,
    box: SearchBox,
    cfg: DEConfig | None = None,
    *,
    init_population: np.ndarray | None = None,
    max_evaluations: int | None = None,
    tol: float = 0.0,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
    executor=None,
) -> OptimResult:
    """Classic DE/rand/1/bin with greedy one-to-one selection.

    ``callback(generation, population, fitness)`` is invoked after the
    initial evaluation (generation 0) and after every generation. Stops early
    when the population's objective spread falls to ``tol``.
    """
    cfg = cfg or DEConfig()
    rng = _as_rng(cfg.seed)
    counter = _Counter(objective, executor)
    n_pop = cfg.pop_size(box.dim)
    pop = box.uniform(rng, n_pop)
    if init_population is not None:
        seeds = np.atleast_2d(np.asarray(init_population, dtype=float))[:n_pop]
        pop[: len(seeds)] = box.clip(seeds)
    fit = counter.batch(pop)
    if callback:
        callback(0, pop.copy(), fit.copy())
    trace = [float(fit.min())]
    reason = "max-generations"
    for gen in range(1, cfg.max_generations + 1):
        if max_evaluations is not None and counter.count + n_pop > max_evaluations:
            reason = "evaluation-budget"
            break
        pop, fit = _de_generation(pop, fit, box, cfg, rng, counter)
        trace.append(float(fit.min()))
        if callback:
            callback(gen, pop.copy(), fit.copy())
        if tol > 0 and np.ptp(fit) <= tol * (1 + abs(fit.min())):
            reason = "converged"
            break
    best = int(np.argmin(fit))
    return OptimResult(pop[best].copy(), float(fit[best]), counter.count, trace, reason)


# -- scatter search --------------------------------------------------------


def segment_probabilities(visits: np.ndarray) -> np.ndarray:
    """Row-wise ``p_ij = (1/f_ij) / sum_k (1/f_ik)``; unvisited segments get all the mass."""
    f = np.asarray(visits, dtype=float)
    f = np.atleast_2d(f)
    out = np.empty_like(f)
    for i, row in enumerate(f):
        zero = row <= 0
        if np.any(zero):
            out[i] = zero / zero.sum()
        else:
            inv = 1.0 / row
            out[i] = inv / inv.sum()
    return out


def combination_children(x1, x2, r) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Type 1/2/3 children for the better vector ``x1`` and the worse ``x2``."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    d = np.asarray(r, dtype=float) * (x2 - x1)
    return x1 - d, x1 + d, x2 + d


class VisitHistory:
    """Segment-visit counts ``F`` (dims x segments) for a box."""

    def __init__(self, box: SearchBox, segments: int):
        self.box = box
        self.m = segments
        self.counts = np.zeros((box.dim, segments))

    def segment_of(self, x) -> np.ndarray:
        u = self.box.normalize(x)
        return np.clip((u * self.m).astype(int), 0, self.m - 1)

    def record(self, x) -> None:
        self.counts[np.arange(self.box.dim), self.segment_of(x)] += 1

    def probabilities(self) -> np.ndarray:
        return segment_probabilities(self.counts)

    def sample_in(self, rng, segments: np.ndarray) -> np.ndarray:
        u = (segments + rng.random(self.box.dim)) / self.m
        return self.box.denormalize(u)

    def seed_vectors(self, rng) -> np.ndarray:
        """``m`` vectors, the j-th having every component in segment j."""
        out = []
        for j in range(self.m):
            x = self.sample_in(rng, np.full(self.box.dim, j))
            self.record(x)
            out.append(x)
        return np.array(out)

    def draw(self, rng) -> np.ndarray:
        """Inverse-CDF draw of a segment per dimension, then a uniform point in it."""
        p = self.probabilities()
        z = rng.random(self.box.dim)
        cdf = np.cumsum(p, axis=1)
        seg = np.array([min(int(np.searchsorted(cdf[i], z[i], side="left")), self.m - 1) for i in range(self.box.dim)])
        x = self.sample_in(rng, seg)
        self.record(x)
        return x


def _farthest_selection(candidates: np.ndarray, chosen: np.ndarray, k: int) -> list[int]:
    """Greedy max-min distance choice of ``k`` rows (normalized coordinates)."""
    picked: list[int] = []
    if len(candidates) == 0 or k <= 0:
        return picked
    ref = chosen.copy()
    dmin = np.min(np.linalg.norm(candidates[:, None, :] - ref[None, :, :], axis=2), axis=1)
    for _ in range(min(k, len(candidates))):
        dm = dmin.copy()
        dm[picked] = -np.inf
        j = int(np.argmax(dm))
        picked.append(j)
        dmin = np.minimum(dmin, np.linalg.norm(candidates - candidates[j], axis=1))
    return picked


class _ScatterState:
    """Elite set plus visit history, shared across hybrid epochs."""

    def __init__(self, box: SearchBox, cfg: ScatterConfig, rng, counter: _Counter):
        self.box = box
        self.cfg = cfg
        self.rng = rng
        self.counter = counter
        self.history = VisitHistory(box, cfg.segments)
        self.elites = np.empty((0, box.dim))
        self.elite_fit = np.empty(0)

    def diverse_population(self, n: int, seed_first: bool) -> np.ndarray:
        rows = []
        if seed_first:
            rows.extend(self.history.seed_vectors(self.rng))
        while len(rows) < n:
            rows.append(self.history.draw(self.rng))
        return np.array(rows)

    def build_elites(self, pop: np.ndarray, fit: np.ndarray, keep_best: bool) -> None:
        """Half by fitness, half by distance from the fitness half."""
        half = self.cfg.elite_count // 2
        if keep_best and len(self.elites):
            pop = np.vstack([self.elites, pop])
            fit = np.concatenate([self.elite_fit, fit])
        order = np.argsort(fit, kind="stable")
        best = order[:half]
        rest = order[half:]
        u = self.box.normalize(pop)
        far = _farthest_selection(u[rest], u[best], self.cfg.elite_count - half)
        idx = np.concatenate([best, rest[far]]).astype(int)
        self.elites = pop[idx].copy()
        self.elite_fit = fit[idx].copy()

    def inject(self, x, fx) -> None:
        """Put an external point into the elite set in place of the worst member."""
        if len(self.elites) == 0:
            return
        if np.any(np.all(self.elites == x, axis=1)):
            return
        w = int(np.argmax(self.elite_fit))
        if fx < self.elite_fit[w]:
            self.elites[w] = x
            self.elite_fit[w] = fx

    def recombine_pass(self) -> int:
        """One pass over all elite pairs; returns the number of replacements."""
        n = len(self.elites)
        half = n // 2
        order = np.argsort(self.elite_fit, kind="stable")
        rank = np.empty(n, int)
        rank[order] = np.arange(n)
        children = []
        for a, b in itertools.combinations(range(n), 2):
            i1, i2 = (a, b) if rank[a] < rank[b] else (b, a)
            x1, x2 = self.elites[i1], self.elites[i2]
            if np.allclose(x1, x2):
                continue
            first1, first2 = rank[i1] < half, rank[i2] < half
            if first1 and first2:
                types = (1, 3, 2, 2)
            elif first1:
                types = (1, 2, 3)
            else:
                types = (2, 1 if self.rng.random() < 0.5 else 3)
            for typ in types:
                r = self.rng.random(self.box.dim)
                child = combination_children(x1, x2, r)[typ - 1]
                children.append(self.box.clip(child))
        if not children:
            return 0
        children = np.array(children)
        for c in children:
            self.history.record(c)
        cfit = self.counter.batch(children)
        replaced = 0
        for c, fc in zip(children, cfit):
            w = int(np.argmax(self.elite_fit))
            if fc < self.elite_fit[w] and not np.any(np.all(self.elites == c, axis=1)):
                self.elites[w] = c
                self.elite_fit[w] = fc
                replaced += 1
        return replaced

    def best(self) -> tuple[np.ndarray, float]:
        i = int(np.argmin(self.elite_fit))
        return self.elites[i].copy(), float(self.elite_fit[i])


def scatter_minimize(
    objective: Objective,
    box: SearchBox,
    cfg: ScatterConfig | None = None,
    *,
    max_evaluations: int | None = None,
    executor=None,
) -> OptimResult:
    """Scatter search with elite/diverse reference sets.

    Recombination passes continue until a pass replaces no elite; then, while
    iterations and evaluations remain, a fresh diverse population is drawn
    from the visit history and the diverse half of the elites is rebuilt.
    """
    cfg = cfg or ScatterConfig()
    rng = _as_rng(cfg.seed)
    counter = _Counter(objective, executor)
    state = _ScatterState(box, cfg, rng, counter)
    trace: list[float] = []
    reason = _scatter_run(state, cfg.max_iterations, max_evaluations, trace, first=True)
    x, fx = state.best()
    return OptimResult(x, fx, counter.count, trace, reason)


def _scatter_run(state: _ScatterState, iterations: int, max_evaluations, trace, first: bool) -> str:
    cfg = state.cfg
    n_first = cfg.n_first(state.box.dim)
    for it in range(iterations):
        if max_evaluations is not None and state.counter.count >= max_evaluations:
            return "evaluation-budget"
        pop = state.diverse_population(n_first, seed_first=first and it == 0)
        fit = state.counter.batch(pop)
        state.build_elites(pop, fit, keep_best=len(state.elites) > 0)
        while True:
            n_rep = state.recombine_pass()
            trace.append(state.best()[1])
            if n_rep == 0:
                break
            if max_evaluations is not None and state.counter.count >= max_evaluations:
                return "evaluation-budget"
    return "max-iterations"


# -- local refinement ------------------------------------------------------


class _BudgetExhausted(Exception):
    pass


def local_refine(
    objective: Objective,
    start,
    box: SearchBox,
    budget: int = 500,
    *,
    gtol: float = 1e-10,
    ftol: float = 1e-15,
) -> OptimResult:
    """Bounded quasi-Newton (L-BFGS-B) with central-difference gradients.

    Works in box-normalized coordinates. ``budget`` caps objective
    evaluations, finite-difference evaluations included. Never returns a
    point worse than ``start``.
    """
    x0 = np.asarray(start, dtype=float)
    if not box.contains(x0):
        raise ConfigurationError("local refinement must start inside the box")
    count = 0
    best = {"x": x0.copy(), "f": math.inf}
    trace: list[float] = []

    def f(u):
        nonlocal count
        if count >= budget:
            raise _BudgetExhausted
        count += 1
        x = box.denormalize(np.clip(u, 0.0, 1.0))
        val = float(objective(x))
        if val < best["f"]:
            best["x"], best["f"] = x.copy(), val
            trace.append(val)
        return val

    u0 = box.normalize(x0)
    f0 = f(u0)
    reason = "converged"
    try:
        res = minimize(
            f,
            u0,
            method="L-BFGS-B",
            jac="3-point",
            bounds=[(0.0, 1.0)] * box.dim,
            options={"maxfun": budget, "maxiter": budget, "gtol": gtol, "ftol": ftol,
                     "finite_diff_rel_step": 1e-6},
        )
        if not res.success:
            reason = "budget" if count >= budget else "stalled"
    except _BudgetExhausted:
        reason = "budget"
    if not best["f"] < f0:
        return OptimResult(x0.copy(), f0, count, trace, "no-improvement")
    return OptimResult(box.clip(best["x"]), best["f"], count, trace, reason)


# -- hybrid ----------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerSettings:
    """Everything :func:`hybrid_minimize` needs, bundled for callers."""

    de: DEConfig = field(default_factory=DEConfig)
    scatter: ScatterConfig = field(default_factory=ScatterConfig)
    refine_budget: int = 2000
    epochs: int = 8
    max_evaluations: int | None = None
    tol: float = 1e-12
    seed: int = 0
    refine_starts: int = 1

    def minimize(self, objective: Objective, box: SearchBox, **kwargs) -> OptimResult:
        return hybrid_minimize(
            objective,
            box,
            self.de,
            self.scatter,
            self.refine_budget,
            self.seed,
            epochs=self.epochs,
            max_evaluations=self.max_evaluations,
            tol=self.tol,
            refine_starts=self.refine_starts,
            **kwargs,
        )

    def to_dict(self) -> dict:
        return {
            "de": dict(vars(self.de)),
            "scatter": dict(vars(self.scatter)),
            "refine_budget": self.refine_budget,
            "epochs": self.epochs,
            "max_evaluations": self.max_evaluations,
            "tol": self.tol,
            "seed": self.seed,
            "refine_starts": self.refine_starts,
        }


def hybrid_minimize(
    objective: Objective,
    box: SearchBox,
    de_cfg: DEConfig | None = None,
    ss_cfg: ScatterConfig | None = None,
    refine_budget: int = 2000,
    seed: int = 0,
    *,
    epochs: int = 8,
    max_evaluations: int | None = None,
    tol: float = 1e-12,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
    executor=None,
    refiner: Callable[[np.ndarray, SearchBox, int], OptimResult] | None = None,
    refine_starts: int = 1,
    initial_points=None,
) -> OptimResult:
    """Interleave DE and scatter-search epochs around a shared incumbent.

    Each epoch runs ``max_generations/epochs`` DE generations, one
    scatter-search iteration whose elite set receives the DE incumbent, and a
    local refinement of the overall best. The refined point is fed back into
    both populations. Stops early once the DE population's objective spread
    has collapsed to ``tol`` (relative to the incumbent). ``callback`` sees
    the DE population after every generation, as in :func:`de_minimize`.
    ``refiner(start, box, budget)`` replaces the default L-BFGS-B polish,
    e.g. with a least-squares method that sees the residual vector. With
    ``refine_starts > 1`` the best members of each epoch's fresh diverse
    population are polished as well. ``initial_points`` replace the first members of the random
    starting population.
    """
    de_cfg = de_cfg or DEConfig()
    ss_cfg = ss_cfg or ScatterConfig()
    rng = np.random.default_rng(seed)
    counter = _Counter(objective, executor)
    n_pop = de_cfg.pop_size(box.dim)
    gens_per_epoch = max(1, math.ceil(de_cfg.max_generations / epochs))

    pop = box.uniform(rng, n_pop)
    if initial_points is not None:
        pts = np.atleast_2d(np.asarray(initial_points, dtype=float))[:n_pop]
        pop[: len(pts)] = box.clip(pts)
    fit = counter.batch(pop)
    generation = 0
    if callback:
        callback(generation, pop.copy(), fit.copy())
    scatter = _ScatterState(box, ss_cfg, rng, counter)
    first_scatter = True
    best_i = int(np.argmin(fit))
    best_x, best_f = pop[best_i].copy(), float(fit[best_i])
    trace = [best_f]
    reason = "max-epochs"

    def over_budget(extra: int = 0) -> bool:
        return max_evaluations is not None and counter.count + extra > max_evaluations

    for epoch in range(epochs):
        prev = best_f
        for _ in range(gens_per_epoch):
            if over_budget(n_pop):
                break
            pop, fit = _de_generation(pop, fit, box, de_cfg, rng, counter)
            generation += 1
            if callback:
                callback(generation, pop.copy(), fit.copy())
        i = int(np.argmin(fit))
        if fit[i] < best_f:
            best_x, best_f = pop[i].copy(), float(fit[i])

        div = dfit = None
        if not over_budget():
            # scatter epoch: one diverse population plus recombination to a fixed point
            n_first = ss_cfg.n_first(box.dim)
            div = scatter.diverse_population(n_first, seed_first=first_scatter)
            first_scatter = False
            dfit = counter.batch(div)
            scatter.build_elites(div, dfit, keep_best=len(scatter.elites) > 0)
            scatter.inject(best_x, best_f)
            for _ in range(ss_cfg.max_iterations):
                if scatter.recombine_pass() == 0 or over_budget():
                    break
            sx, sf = scatter.best()
            if sf < best_f:
                best_x, best_f = sx, sf

        if refine_budget > 0 and not over_budget():
            starts = [best_x]
            if refine_starts > 1 and div is not None:
                # fresh diverse points reach basins the elites have abandoned
                starts += list(div[np.argsort(dfit, kind="stable")[: refine_starts - 1]])
            polish = refiner or partial(local_refine, objective)
            for x_start in starts:
                budget = refine_budget
                if max_evaluations is not None:
                    budget = max(0, min(budget, max_evaluations - counter.count))
                if budget <= 2 * box.dim + 2:
                    break
                loc = polish(x_start, box, budget)
                counter.count += loc.evaluations_used
                scatter.inject(loc.best_point, loc.best_value)
                if loc.best_value < best_f:
                    best_x, best_f = loc.best_point, loc.best_value

        # share the incumbent with both populations
        w = int(np.argmax(fit))
        if best_f < fit[w] and not np.any(np.all(pop == best_x, axis=1)):
            pop[w], fit[w] = best_x, best_f
        scatter.inject(best_x, best_f)
        trace.append(best_f)
        if over_budget():
            reason = "evaluation-budget"
            break
        spread = float(np.ptp(fit))
        if spread <= tol * (1.0 + abs(best_f)):
            reason = "converged" if prev > best_f or epoch == 0 else "no-improvement"
            break
    return OptimResult(best_x, best_f, counter.count, trace, reason)
