"""Differential evolution over signal parameters, local refinement and the full design loop."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from . import sensitivity as sens
from .excitation import (AdmissibleSet, ChanceConstraint, FeasibilityReport, Signal, check_admissible,
                         cost_functional)
from .lpv import SurrogateResponse, SurrogateSystem, TimeGrid
from .models import BlackBoxModel, SimulationError, simulate_many
from .pce import ParameterEnsemble
from .transport import EQUIPROBABLE, indices_along_trajectory, sample_parameters

log = logging.getLogger(__name__)


@dataclass
class DeConfig:
    """Differential evolution settings; the population has ``n_pop * dim(p)`` members."""

    n_pop: int = 20
    max_iter: int = 100
    F: float = 0.8
    CR: float = 0.9
    seed: int = 0
    penalty: float | None = None  # None: 1e3 * max |J| over the initial population
    stagnation: int = 30
    stagnation_tol: float = 1e-10
    threads: int = 1
    refine: bool = True
    refine_tol: float = 1e-6

    def __post_init__(self):
        if self.n_pop < 4:
            raise ValueError("n_pop must be at least 4")
        if not 0.0 < self.F <= 2.0:
            raise ValueError("F must lie in (0, 2]")
        if not 0.0 <= self.CR <= 1.0:
            raise ValueError("CR must lie in [0, 1]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass
class OptimizationResult:
    p: np.ndarray
    J: float
    trace: list  # best J after every generation (then after refinement)
    n_evals: int
    n_generations: int
    feasibility: FeasibilityReport | None = None
    J_raw: float | None = None
    penalty: float | None = None
    runs_per_generation: list = field(default_factory=list)
    stopped: str = "max_iter"


def initial_population(lower, upper, config: DeConfig) -> np.ndarray:
    """Uniform random members inside the boxes, drawn from the first seed stream."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    size = config.n_pop * len(lower)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    return lower + rng.random((size, len(lower))) * (upper - lower)


def _clean(v) -> float:
    v = float(v)
    return -math.inf if math.isnan(v) else v


def _evaluate_all(f, X, threads):
    if threads > 1 and len(X) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array([_clean(v) for v in pool.map(f, list(X))])
    return np.array([_clean(f(x)) for x in X])


def differential_evolution(objective: Callable, lower, upper, config: DeConfig,
                           callback: Callable | None = None, population=None) -> OptimizationResult:
    """Maximize ``objective`` with DE/rand/1/bin inside the boxes.

    Each member draws its donors and crossover mask from its own random
    stream (spawned from ``config.seed``), and the whole generation is
    evaluated before selection, so results do not depend on ``threads``.
    ``callback(gen, best_J, best_p)`` runs after every generation.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    dim = len(lower)
    pop = initial_population(lower, upper, config) if population is None else np.array(population, float)
    NP = len(pop)
    if NP < 4:
        raise ValueError("DE needs at least 4 members")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(NP + 1)[1:]]
    fit = _evaluate_all(objective, pop, config.threads)
    n_evals = NP
    best = int(np.argmax(fit))
    trace = [float(fit[best])]
    stopped = "max_iter"
    if callback:
        callback(0, fit[best], pop[best])
    gen = 0
    for gen in range(1, config.max_iter + 1):
        trials = np.empty_like(pop)
        for i in range(NP):
            rng = streams[i]
            a, b, c = rng.choice(NP - 1, 3, replace=False)
            a, b, c = (k + (k >= i) for k in (a, b, c))
            mutant = pop[a] + config.F * (pop[b] - pop[c])
            mask = rng.random(dim) < config.CR
            mask[rng.integers(dim)] = True
            trials[i] = np.clip(np.where(mask, mutant, pop[i]), lower, upper)
        tfit = _evaluate_all(objective, trials, config.threads)
        n_evals += NP
        better = tfit >= fit
        pop[better] = trials[better]
        fit[better] = tfit[better]
        best = int(np.argmax(fit))
        trace.append(float(fit[best]))
        if callback:
            callback(gen, fit[best], pop[best])
        if config.stagnation and gen >= config.stagnation:
            if trace[-1] - trace[-1 - config.stagnation] <= config.stagnation_tol * max(1.0, abs(trace[-1])):
                stopped = "stagnation"
                break
    return OptimizationResult(pop[best].copy(), float(fit[best]), trace, n_evals, gen, stopped=stopped)


def _fd_gradient(f, p, lower, upper, free, f0=None):
    g = np.zeros_like(p)
    n = 0
    for k in np.flatnonzero(free):
        h = max(1e-6 * abs(p[k]), 1e-9)
        hi = min(p[k] + h, upper[k])
        lo = max(p[k] - h, lower[k])
        if hi == lo:
            continue
        xp, xm = p.copy(), p.copy()
        xp[k], xm[k] = hi, lo
        g[k] = (f(xp) - f(xm)) / (hi - lo)
        n += 2
    return g, n


def refine_local(objective: Callable, p0, lower, upper, tol: float = 1e-6, max_iter: int = 100):
    """Projected quasi-Newton ascent (L-BFGS-B) from p0 with central-difference gradients.

    Returns (p, J, n_evals); J is never below objective(p0).
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    p0 = np.clip(np.asarray(p0, float), lower, upper)
    J0 = _clean(objective(p0))
    n = 1
    if not math.isfinite(J0):
        warnings.warn("objective is not finite at the refinement start; keeping the start point",
                      RuntimeWarning, stacklevel=2)
        return p0, J0, n
    free = upper > lower
    if not free.any():
        return p0, J0, n
    counter = [0]

    def neg(x):
        counter[0] += 1
        v = _clean(objective(x))
        return 1e300 if not math.isfinite(v) else -v

    def jac(x):
        g, k = _fd_gradient(lambda y: -neg(y), x, lower, upper, free)
        return -g

    res = minimize(neg, p0, jac=jac, method="L-BFGS-B", bounds=list(zip(lower, upper)),
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 1e-15})
    p = np.clip(res.x, lower, upper)
    J = _clean(objective(p))
    n += counter[0] + 1
    if J < J0:
        return p0, J0, n
    return p, J, n


# the design problem ----------------------------------------------------------

@dataclass
class EngineOutput:
    times: np.ndarray
    dS: np.ndarray  # (K, m, q)
    mean: np.ndarray  # (K, m)
    var: np.ndarray  # (K, m)


class IntrusiveEngine:
    """Sensitivities from a Galerkin surrogate; one surrogate run per evaluation."""

    name = "intrusive"

    def __init__(self, surrogate: SurrogateSystem, S_min=0.0, kind: str = sens.FIRST_ORDER):
        self.surrogate = surrogate
        self.S_min = S_min
        self.kind = kind
        self.sets = sens.build_index_sets(surrogate.basis)
        self.response = None

    def prepare(self, grid: TimeGrid, every: int, seed: int = 0) -> None:
        if self.response is None or self.response.grid != grid or self.response.every != every:
            self.response = SurrogateResponse(self.surrogate, grid, every)

    @property
    def runs(self) -> int:
        return 0 if self.response is None else self.response.calls

    def evaluate(self, u) -> EngineOutput:
        Y = self.response.output(u)
        basis = self.surrogate.basis
        S = sens.sensitivity_trajectory(Y, self.sets, self.kind)
        Yr = Y.reshape(len(Y), self.surrogate.m, basis.size)
        var = sens.output_variance(Y, basis)
        times = self.response.grid.output_times(self.response.every)
        return EngineOutput(times, sens.effective_sensitivity(S, self.S_min), Yr[..., 0], var)


class TransportEngine:
    """Sensitivities from model samples; the parameter sample is drawn once per solve."""

    name = "transport"

    def __init__(self, model: BlackBoxModel, ensemble: ParameterEnsemble, n_samples: int = 100,
                 M: int | None = None, strategy: str = EQUIPROBABLE, seed: int = 0, threads: int = 1,
                 S_min=0.0):
        self.model, self.ensemble = model, ensemble
        self.n_samples, self.M, self.strategy = n_samples, M, strategy
        self.seed, self.threads, self.S_min = seed, threads, S_min
        self.thetas = None
        self.grid = None
        self.every = 1

    def prepare(self, grid: TimeGrid, every: int, seed: int | None = None) -> None:
        self.grid, self.every = grid, every
        self.thetas = sample_parameters(self.ensemble, self.n_samples, self.seed if seed is None else seed)

    @property
    def runs(self) -> int:
        return self.model.n_simulations

    def evaluate(self, u) -> EngineOutput:
        Y = simulate_many(self.model, self.thetas, u, self.grid, self.every, self.threads)
        times = self.grid.output_times(self.every)
        res = indices_along_trajectory(self.thetas, Y, times, self.M, self.strategy)
        mean = Y.mean(axis=0)
        var = Y.var(axis=0)
        return EngineOutput(times, sens.effective_sensitivity(res.S, self.S_min), mean, var)


@dataclass
class Evaluation:
    J_raw: float
    violation: float  # sum of squared constraint violations
    report: FeasibilityReport
    error: str | None = None


@dataclass
class ExcitationProblem:
    signal: Signal
    admissible: AdmissibleSet
    Q: np.ndarray
    R: np.ndarray
    grid: TimeGrid
    engine: object
    chance: list = field(default_factory=list)  # ChanceConstraint entries
    every: int = 1

    def __post_init__(self):
        if len(self.admissible.lower) != self.signal.dim:
            raise ValueError(f"boxes have {len(self.admissible.lower)} entries, signal has {self.signal.dim}")

    def evaluate(self, p) -> Evaluation:
        """Raw cost, squared constraint violations and the admissibility report."""
        p = np.asarray(p, dtype=float)
        report = check_admissible(self.signal, p, self.admissible, self.grid.h)
        u = self.signal.bind(p)
        try:
            out = self.engine.evaluate(u)
        except (SimulationError, FloatingPointError, RuntimeError) as err:
            return Evaluation(-math.inf, math.inf, report, str(err))
        J = cost_functional(out.dS, u(out.times), self.Q, self.R, out.times)
        viol = report.squared_sum()
        for cc in self.chance:
            marg = cc.worst_margin(out.mean, out.var)
            report.violations[f"chance[{cc.output}]"] = max(-marg, 0.0)
            viol += min(marg, 0.0) ** 2
        return Evaluation(J, viol, report)

    def penalized(self, p, rho: float) -> float:
        ev = self.evaluate(p)
        if ev.error is not None:
            log.debug("engine failure at p=%s: %s", p, ev.error)
            return -math.inf
        return ev.J_raw - rho * ev.violation


def solve(problem: ExcitationProblem, config: DeConfig, progress: Callable | None = None) -> OptimizationResult:
    """Set up the engine, run DE, refine locally and report feasibility.

    ``runs_per_generation`` lists how many surrogate runs (intrusive) or model
    simulations (transport) each generation used.
    """
    adm = problem.admissible
    problem.engine.prepare(problem.grid, problem.every, config.seed)
    pop = initial_population(adm.lower, adm.upper, config)
    first = [problem.evaluate(x) for x in pop]
    if config.penalty is None:
        finite = [abs(e.J_raw) for e in first if math.isfinite(e.J_raw)]
        scale = max(finite, default=0.0)
        rho = 1e3 * scale if scale > 0 else 1e3
    else:
        rho = config.penalty
    cache = {x.tobytes(): (-math.inf if e.error else e.J_raw - rho * e.violation) for x, e in zip(pop, first)}

    def f(x):
        key = np.asarray(x, float).tobytes()
        if key in cache:
            return cache.pop(key)
        return problem.penalized(x, rho)

    runs = []
    last = [problem.engine.runs]

    def cb(gen, J, p):
        now = problem.engine.runs
        if gen > 0:
            runs.append(now - last[0])
        last[0] = now
        if progress:
            feas = check_admissible(problem.signal, p, adm, problem.grid.h).feasible
            progress(gen, J, p, feas)

    res = differential_evolution(f, adm.lower, adm.upper, config, callback=cb, population=pop)
    res.runs_per_generation = runs
    res.penalty = rho
    if config.refine:
        p, J, n = refine_local(lambda x: problem.penalized(x, rho), res.p, adm.lower, adm.upper,
                               config.refine_tol)
        res.n_evals += n
        if J > res.J:
            res.p, res.J = p, J
        res.trace.append(res.J)
    final = problem.evaluate(res.p)
    res.feasibility = final.report
    res.J_raw = final.J_raw
    return res
