"""Model-discrimination design over piecewise-constant feed profiles.

The criterion averages, over all unordered pairs of candidate growth laws,
the largest squared gap between their predicted C_s at the measurement
times.  It is maximized with a self-adaptive rand/1/bin differential
evolution whose donors are drawn from a ring neighbourhood of the target.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import expr
from .ode import (
    DEFAULT_TOLERANCES,
    OK,
    ControlProfile,
    IntegrationGrid,
    _solve_segments_jit,
    _stops_and_controls,
    integrate,
)
from .plant import KnownConstants

WORST_OBJECTIVE = -float(np.finfo(float).max)


@dataclass(frozen=True)
class CandidateModel:
    expression: tuple
    identifier: int = 0

    @property
    def equation(self) -> str:
        return expr.to_string(self.expression)

    def finite_on(self, upper: float, n: int = 50_000) -> bool:
        """Whether the growth law is finite on ``(0, upper]``.

        Besides evaluating on an ``n``-point grid, every denominator is checked
        for a sign change between neighbouring grid points: a continuous
        denominator that flips sign has a zero in between, which is a pole the
        grid itself would step over.
        """
        grid = np.linspace(0.0, upper, n + 1)[1:]
        prog = self.expression
        if not np.all(np.isfinite(expr.evaluate(prog, grid))):
            return False
        for i, tok in enumerate(prog):
            if tok != "/":
                continue
            start = expr.subtree_end(prog, i + 1)
            den = np.broadcast_to(expr.evaluate(prog[start:expr.subtree_end(prog, start)], grid), grid.shape)
            if np.any(den == 0) or np.any(np.signbit(den[1:]) != np.signbit(den[:-1])):
                return False
        return True


@dataclass(frozen=True)
class DesignProblem:
    candidates: tuple
    constants: KnownConstants
    grid: IntegrationGrid
    u_min: float
    u_max: float
    tolerances: tuple = DEFAULT_TOLERANCES

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if len(self.candidates) < 2:
            raise ValueError("discrimination needs at least two candidate models")
        if not self.u_min <= self.u_max:
            raise ValueError("invalid control bounds")

    @property
    def M(self) -> int:
        return len(self.candidates)

    def profile(self, coefficients) -> ControlProfile:
        return ControlProfile(np.asarray(coefficients, float), self.u_min, self.u_max, self.grid.t_end)

    def packed(self):
        """Candidate programs stacked into padded opcode/value arrays."""
        lens = np.array([len(c.expression) for c in self.candidates], dtype=np.int64)
        width = int(lens.max())
        ops = np.zeros((self.M, width), dtype=np.int64)
        vals = np.zeros((self.M, width))
        for i, c in enumerate(self.candidates):
            o, v = expr.compile_program(c.expression)
            ops[i, : o.size] = o
            vals[i, : v.size] = v
        return ops, vals, lens


@njit(cache=True)
def _candidate_rhs(t, x, u, args):
    ops, vals, n, c, stack = args
    Cs, Cx, V = x[0], x[1], x[2]
    out = np.empty(3)
    mu = expr.run_program_into(ops, vals, n, Cs, stack)
    if not (V > 0.0 and math.isfinite(mu)):
        out[:] = np.nan
        return out
    D = u / V
    out[0] = -(mu / c[0] + c[1]) * Cx + D * (c[2] - Cs)
    out[1] = mu * Cx - D * Cx
    out[2] = u
    return out


@njit
def _simulate_all(ops, vals, lens, consts, x0, stops, u_vals, pick, rtol, atol, max_steps):
    M = lens.size
    cs = np.full((M, pick.size), np.nan)
    stack = np.empty(ops.shape[1])
    for i in range(M):
        args = (ops[i, : lens[i]], vals[i, : lens[i]], lens[i], consts, stack)
        out, status, _ = _solve_segments_jit(_candidate_rhs, args, x0, stops, u_vals, rtol, atol, max_steps)
        if status != OK:
            return cs, False
        for k in range(pick.size):
            cs[i, k] = out[pick[k], 0]
    return cs, True


@njit(cache=True)
def pairwise_criterion(cs):
    """Mean over pairs i<j of max_k (cs[i,k] - cs[j,k])^2 for an (M, N) array."""
    M = cs.shape[0]
    total = 0.0
    for i in range(M):
        for j in range(i + 1, M):
            best = 0.0
            for k in range(cs.shape[1]):
                d = cs[i, k] - cs[j, k]
                if d * d > best:
                    best = d * d
            total += best
    # 2!(M-2)!/M! = 1 / (number of pairs)
    return total * 2.0 / (M * (M - 1))


@njit
def _objective_kernel(ops, vals, lens, consts, x0, stops, u_vals, pick, rtol, atol, max_steps):
    cs, ok = _simulate_all(ops, vals, lens, consts, x0, stops, u_vals, pick, rtol, atol, max_steps)
    if not ok:
        return WORST_OBJECTIVE
    v = pairwise_criterion(cs)
    return v if math.isfinite(v) else WORST_OBJECTIVE


_NATIVE_TEMPLATE = """
@njit
def growth(i, x):
{branches}
    return math.nan


@njit
def rhs(t, x, u, args):
    i, c = args
    Cs, Cx, V = x[0], x[1], x[2]
    out = np.empty(3)
    mu = growth(i, Cs)
    if not (V > 0.0 and math.isfinite(mu)):
        out[:] = np.nan
        return out
    D = u / V
    out[0] = -(mu / c[0] + c[1]) * Cx + D * (c[2] - Cs)
    out[1] = mu * Cx - D * Cx
    out[2] = u
    return out


@njit
def simulate_all(M, consts, x0, stops, u_vals, pick, rtol, atol, max_steps):
    cs = np.full((M, pick.size), np.nan)
    for i in range(M):
        out, status, _ = solve(rhs, (i, consts), x0, stops, u_vals, rtol, atol, max_steps)
        if status != OK:
            return cs, False
        for k in range(pick.size):
            cs[i, k] = out[pick[k], 0]
    return cs, True


@njit
def objective(M, consts, x0, stops, u_vals, pick, rtol, atol, max_steps):
    cs, ok = simulate_all(M, consts, x0, stops, u_vals, pick, rtol, atol, max_steps)
    if not ok:
        return WORST
    v = criterion(cs)
    return v if math.isfinite(v) else WORST
"""


def _native_kernels(candidates):
    """Compile the candidates' growth laws straight into the design kernel.

    Same arithmetic as the opcode interpreter (see ``expr.to_source``), but
    without interpretation overhead in the right-hand side; worthwhile for
    long optimizations.  Costs one JIT compile per call.
    """
    branches = "\n".join(
        f"    if i == {i}:\n        return {expr.to_source(c.expression)}" for i, c in enumerate(candidates)
    )
    namespace = {
        "njit": njit, "math": math, "np": np, "OK": OK, "WORST": WORST_OBJECTIVE,
        "solve": _solve_segments_jit, "criterion": pairwise_criterion,
        **{name: getattr(expr, name) for name in expr._OP_FUNCS.values()},
    }
    exec(compile(_NATIVE_TEMPLATE.format(branches=branches), "<design-kernel>", "exec"), namespace)
    return namespace["simulate_all"], namespace["objective"]


class _CompiledProblem:
    def __init__(self, problem: DesignProblem, max_steps: int = 50_000, native: bool = False):
        self.problem = problem
        self.ops, self.vals, self.lens = problem.packed()
        self.consts = problem.constants.as_array()
        self.x0 = np.array(problem.constants.x0, dtype=float)
        probe = problem.profile(np.full(problem.grid.N, problem.u_min))
        self.stops, _ = _stops_and_controls(probe, problem.grid)
        self.mids = 0.5 * (self.stops[:-1] + self.stops[1:])
        g = problem.grid
        self.pick = np.searchsorted(self.stops[1:], g.measurement_times - 1e-12 * g.t_end)
        self.rtol, self.atol = (float(v) for v in problem.tolerances)
        self.max_steps = max_steps
        self.native = _native_kernels(problem.candidates) if native else None

    def u_vals(self, coefficients):
        N = coefficients.size
        idx = np.minimum((self.mids * N / self.problem.grid.t_end).astype(np.int64), N - 1)
        return np.ascontiguousarray(coefficients[idx], dtype=float)

    def objective(self, coefficients) -> float:
        u = self.u_vals(np.asarray(coefficients, float))
        if self.native is not None:
            value = self.native[1](self.problem.M, self.consts, self.x0, self.stops, u, self.pick,
                                   self.rtol, self.atol, self.max_steps)
        else:
            value = _objective_kernel(self.ops, self.vals, self.lens, self.consts, self.x0, self.stops,
                                      u, self.pick, self.rtol, self.atol, self.max_steps)
        return float(value)

    def trajectories(self, coefficients):
        u = self.u_vals(np.asarray(coefficients, float))
        if self.native is not None:
            cs, ok = self.native[0](self.problem.M, self.consts, self.x0, self.stops, u, self.pick,
                                    self.rtol, self.atol, self.max_steps)
        else:
            cs, ok = _simulate_all(self.ops, self.vals, self.lens, self.consts, self.x0, self.stops,
                                   u, self.pick, self.rtol, self.atol, self.max_steps)
        return cs, bool(ok)


def _simulate(expression, constants, grid, tolerances, profile, max_steps):
    ops, vals = expr.compile_program(expression)
    return integrate(
        _candidate_rhs,
        constants.x0,
        profile,
        grid,
        tolerances,
        args=(ops, vals, ops.size, constants.as_array(), np.empty(ops.size)),
        max_steps=max_steps,
    )


def simulate_candidate(model: CandidateModel, profile: ControlProfile, problem: DesignProblem,
                       max_steps: int = 50_000):
    """States of the reactor with the candidate growth law at the measurement times."""
    return _simulate(model.expression, problem.constants, problem.grid, problem.tolerances, profile, max_steps)


def resolvable(model: CandidateModel, constants: KnownConstants, grid: IntegrationGrid,
               u_min: float, u_max: float, tolerances=DEFAULT_TOLERANCES, max_steps: int = 10_000) -> bool:
    """Whether the candidate integrates within ``max_steps`` under both constant extreme feeds."""
    for level in (u_min, u_max):
        prof = ControlProfile.constant(level, grid.N, u_min, u_max, grid.t_end)
        if not _simulate(model.expression, constants, grid, tolerances, prof, max_steps).ok:
            return False
    return True


def discrimination_objective(profile: ControlProfile, problem: DesignProblem) -> float:
    """Pairwise discrimination value; any failed simulation gives WORST_OBJECTIVE."""
    if np.any(profile.coefficients < problem.u_min) or np.any(profile.coefficients > problem.u_max):
        raise ValueError("profile outside the design bounds")
    return _CompiledProblem(problem).objective(profile.coefficients)


@dataclass(frozen=True)
class DESettings:
    population: int = 50
    budget: int = 20_000
    window: int | None = None  # donor ring radius; population // 5 when unset
    tau_F: float = 0.1
    tau_CR: float = 0.1
    F_lower: float = 0.1
    F_upper: float = 0.9
    F_init: float = 0.5
    CR_init: float = 0.9
    seed_bounds: bool = True  # start two members at the all-lower and all-upper corners
    # candidates needing more solver steps than this under a constant extreme feed are not designed for
    screen_steps: int = 10_000

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("DE needs a population of at least 4")
        if self.budget < 1 or self.screen_steps < 1:
            raise ValueError("budget and screen_steps must be >= 1")

    @property
    def radius(self) -> int:
        w = self.window if self.window is not None else self.population // 5
        return max(2, min(int(w), (self.population - 1) // 2))


@dataclass
class DesignResult:
    profile: ControlProfile
    objective: float
    evaluations: int
    history: list

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "objective": self.objective,
            "evaluations": self.evaluations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        """Step-function table: segment start time and control value."""
        starts = self.profile.switch_times()[:-1]
        rows = ["segment_start,value"]
        rows += [f"{float(t)!r},{float(v)!r}" for t, v in zip(starts, self.profile.coefficients)]
        rows.append(f"{float(self.profile.t_end)!r},{float(self.profile.coefficients[-1])!r}")
        return "\n".join(rows) + "\n"


def differential_evolution(fun, lower, upper, settings: DESettings, rng: np.random.Generator):
    """Maximize ``fun`` over a box with radius-limited self-adaptive rand/1/bin.

    Each target i draws its base and difference vectors from the ring
    neighbourhood ``i +/- radius`` (excluding i).  F and CR are per-individual
    and resampled with probabilities ``tau_F``/``tau_CR`` before each trial.
    Returns ``(best x, best value, evaluations, best-so-far history)``.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    dim = lower.size
    NP = settings.population
    budget = settings.budget
    pop = lower + (upper - lower) * rng.random((NP, dim))
    if settings.seed_bounds:
        # constant extreme feeds are often near-optimal and rarely sampled in high dimension
        pop[0], pop[1] = upper, lower
    F = np.full(NP, settings.F_init)
    CR = np.full(NP, settings.CR_init)
    fit = np.empty(NP)
    evals = 0
    best_x, best_f = None, -math.inf
    history = []

    def consider(x, f):
        nonlocal best_x, best_f
        if best_x is None or f > best_f:
            best_x, best_f = x.copy(), f
        history.append(best_f)

    for i in range(NP):
        if evals >= budget:
            break
        fit[i] = fun(pop[i])
        evals += 1
        consider(pop[i], fit[i])
    if evals < NP:
        return best_x, best_f, evals, history

    R = settings.radius
    offsets = np.array([o for o in range(-R, R + 1) if o != 0])
    span = upper - lower
    while evals < budget:
        for i in range(NP):
            if evals >= budget:
                break
            Fi = settings.F_lower + settings.F_upper * rng.random() if rng.random() < settings.tau_F else F[i]
            CRi = rng.random() if rng.random() < settings.tau_CR else CR[i]
            r1, r2, r3 = (i + rng.choice(offsets, size=3, replace=False)) % NP
            mutant = pop[r1] + Fi * (pop[r2] - pop[r3])
            # out-of-box components land between the base vector and the violated bound
            lo = mutant < lower
            hi = mutant > upper
            mutant[lo] = lower[lo] + rng.random(lo.sum()) * (pop[r1][lo] - lower[lo])
            mutant[hi] = upper[hi] - rng.random(hi.sum()) * (upper[hi] - pop[r1][hi])
            cross = rng.random(dim) < CRi
            cross[rng.integers(dim)] = True
            trial = np.where(cross, mutant, pop[i])
            trial = np.clip(trial, lower, upper) if np.any(span == 0) else trial
            f = fun(trial)
            evals += 1
            consider(trial, f)
            if f >= fit[i]:
                pop[i], fit[i], F[i], CR[i] = trial, f, Fi, CRi
    return best_x, best_f, evals, history


def optimize_controls(problem: DesignProblem, budget: int | None = None, seed: int = 0,
                      settings: DESettings | None = None) -> DesignResult:
    """Maximize the discrimination criterion over the control coefficients."""
    settings = settings or DESettings()
    if budget is not None:
        if budget < 1:
            raise ValueError("budget must be >= 1")
        settings = DESettings(**{**settings.__dict__, "budget": int(budget)})
    compiled = _CompiledProblem(problem, native=True)
    N = problem.grid.N
    lower = np.full(N, problem.u_min)
    upper = np.full(N, problem.u_max)
    rng = np.random.Generator(np.random.PCG64(seed))
    x, f, evals, history = differential_evolution(compiled.objective, lower, upper, settings, rng)
    x = np.clip(x, lower, upper)
    return DesignResult(problem.profile(x), float(f), evals, history)
