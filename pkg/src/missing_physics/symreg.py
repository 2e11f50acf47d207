"""Genetic-programming symbolic regression with a per-complexity hall of fame."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from . import expr
from .expr import BINARY, UNARY, complexity, constant_indices, evaluate, with_constants

LOSS_FLOOR = 1e-300


@dataclass(frozen=True)
class GPSettings:
    population: int = 200
    tournament: int = 5
    p_crossover: float = 0.7
    p_mutation: float = 0.25
    p_constant: float = 0.05
    max_complexity: int = 20
    iterations: int = 1000
    top_m: int = 10
    # fraction of offspring whose constants are refit each generation
    p_optimize: float = 0.2
    optimize_iters: int = 60
    parsimony: float = 0.01
    # fraction of the population replaced by hall-of-fame members per generation
    hof_migration: float = 0.02
    init_max_depth: int = 4
    # log-fitness penalty per unit share of the population at the same complexity
    adaptive_parsimony: float = 0.0

    def __post_init__(self):
        if self.population < 2 or self.tournament < 1 or self.tournament > self.population:
            raise ValueError("invalid population/tournament sizes")
        if self.max_complexity < 1 or self.iterations < 0 or self.top_m < 1:
            raise ValueError("invalid GP budget settings")
        probs = (self.p_crossover, self.p_mutation, self.p_constant)
        if any(p < 0 for p in probs) or sum(probs) <= 0:
            raise ValueError("variation probabilities must be nonnegative")


def _as_inputs(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.ascontiguousarray(X[None, :] if X.ndim <= 1 else X)


def sse(program, X, y) -> float:
    """Summed squared error; inf when any prediction is non-finite."""
    ops, vals = expr.compile_program(program)
    return float(expr.program_sse(ops, vals, _as_inputs(X), np.asarray(y, dtype=float)))


@njit(cache=True)
def _sse_at(ops, vals, idx, c, X, y):
    for j in range(idx.size):
        vals[idx[j]] = c[j]
    return expr.program_sse(ops, vals, X, y)


@njit(cache=True)
def _nelder_mead(ops, vals, idx, c0, X, y, max_iter, xatol, fatol, adaptive):
    """Nelder-Mead on the leaf constants; mirrors scipy's simplex rules.

    Returns ``(best constants, best loss)``.  ``vals`` is used as scratch.
    """
    n = c0.size
    if adaptive:
        rho, chi, psi, sigma = 1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n
    else:
        rho, chi, psi, sigma = 1.0, 2.0, 0.5, 0.5
    sim = np.empty((n + 1, n))
    fsim = np.empty(n + 1)
    sim[0] = c0
    for k in range(n):
        y_k = c0.copy()
        y_k[k] = 1.05 * y_k[k] if y_k[k] != 0.0 else 0.00025
        sim[k + 1] = y_k
    for k in range(n + 1):
        fsim[k] = _sse_at(ops, vals, idx, sim[k], X, y)
    order = np.argsort(fsim, kind="mergesort")
    sim = sim[order]
    fsim = fsim[order]
    it = 1
    while it < max_iter:
        # scipy's test: simplex spread and value spread both below tolerance
        spread_x = 0.0
        spread_f = 0.0
        for k in range(1, n + 1):
            spread_f = max(spread_f, abs(fsim[0] - fsim[k]))
            for j in range(n):
                spread_x = max(spread_x, abs(sim[k, j] - sim[0, j]))
        if spread_x <= xatol and spread_f <= fatol:
            break
        xbar = np.zeros(n)
        for k in range(n):
            xbar += sim[k]
        xbar /= n
        xr = (1 + rho) * xbar - rho * sim[n]
        fxr = _sse_at(ops, vals, idx, xr, X, y)
        shrink = False
        if fxr < fsim[0]:
            xe = (1 + rho * chi) * xbar - rho * chi * sim[n]
            fxe = _sse_at(ops, vals, idx, xe, X, y)
            if fxe < fxr:
                sim[n] = xe
                fsim[n] = fxe
            else:
                sim[n] = xr
                fsim[n] = fxr
        elif fxr < fsim[n - 1]:
            sim[n] = xr
            fsim[n] = fxr
        elif fxr < fsim[n]:
            xc = (1 + psi * rho) * xbar - psi * rho * sim[n]
            fxc = _sse_at(ops, vals, idx, xc, X, y)
            if fxc <= fxr:
                sim[n] = xc
                fsim[n] = fxc
            else:
                shrink = True
        else:
            xcc = (1 - psi) * xbar + psi * sim[n]
            fxcc = _sse_at(ops, vals, idx, xcc, X, y)
            if fxcc < fsim[n]:
                sim[n] = xcc
                fsim[n] = fxcc
            else:
                shrink = True
        if shrink:
            for k in range(1, n + 1):
                sim[k] = sim[0] + sigma * (sim[k] - sim[0])
                fsim[k] = _sse_at(ops, vals, idx, sim[k], X, y)
        order = np.argsort(fsim, kind="mergesort")
        sim = sim[order]
        fsim = fsim[order]
        it += 1
    return sim[0].copy(), fsim[0]


def fit_constants(program, X, y, max_iter: int = 2000, xatol: float = 1e-12, fatol: float = 1e-16):
    """Refit the leaf constants by Nelder-Mead from their current values.

    Returns ``(program, loss)``; the loss never exceeds that of the input.
    """
    program = tuple(program)
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("empty dataset")
    X = _as_inputs(X)
    ops, vals = expr.compile_program(program)
    start = float(expr.program_sse(ops, vals, X, y))
    idx = np.array(constant_indices(program), dtype=np.int64)
    if not idx.size:
        return program, start
    if not math.isfinite(start):
        return program, math.inf
    adaptive = idx.size > 2
    c, f = _nelder_mead(ops, vals, idx, vals[idx].copy(), X, y, max_iter, xatol, fatol, adaptive)
    # Nelder-Mead stalls on flat valleys; one restart from the result usually settles it
    if f < start and max_iter > 200:
        c2, f2 = _nelder_mead(ops, vals, idx, c, X, y, max_iter, xatol, fatol, adaptive)
        if f2 <= f:
            c, f = c2, f2
    if math.isfinite(f) and f < start:
        return with_constants(program, c), float(f)
    return program, start


@dataclass
class Candidate:
    program: tuple
    loss: float
    score: float = 0.0

    @property
    def complexity(self) -> int:
        return complexity(self.program)

    @property
    def equation(self) -> str:
        return expr.to_string(self.program)

    def to_dict(self) -> dict:
        return {
            "complexity": self.complexity,
            "loss": self.loss,
            "score": self.score,
            "equation": self.equation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(expr.parse(d["equation"]), float(d["loss"]), float(d.get("score", 0.0)))


def _sig5(x: float) -> float:
    return float(f"{x:.4e}") if math.isfinite(x) else x


class HallOfFame:
    """Best candidate per complexity, with the Pareto frontier derived from it.

    A higher-complexity entry only enters the frontier when its loss, rounded
    to 5 significant digits, is strictly below every simpler frontier entry.
    """

    def __init__(self, max_complexity: int = 20, baseline_loss: float | None = None):
        self.max_complexity = max_complexity
        self.best: dict[int, Candidate] = {}
        self.baseline_loss = baseline_loss

    def update(self, program, loss) -> bool:
        c = complexity(program)
        if c > self.max_complexity or not math.isfinite(loss):
            return False
        cur = self.best.get(c)
        if cur is None or loss < cur.loss:
            self.best[c] = Candidate(tuple(program), float(loss))
            return True
        return False

    def frontier(self) -> list[Candidate]:
        out = []
        for c in sorted(self.best):
            cand = self.best[c]
            if not out or _sig5(cand.loss) < _sig5(out[-1].loss):
                out.append(cand)
        return out

    def to_dict(self) -> dict:
        return {
            "max_complexity": self.max_complexity,
            "baseline_loss": self.baseline_loss,
            "best": [self.best[c].to_dict() for c in sorted(self.best)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HallOfFame":
        hof = cls(d["max_complexity"], d.get("baseline_loss"))
        for item in d["best"]:
            cand = Candidate.from_dict(item)
            hof.best[cand.complexity] = cand
        return hof

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "HallOfFame":
        return cls.from_dict(json.loads(text))


def score_frontier(frontier, baseline_loss: float | None = None) -> list[Candidate]:
    """Score = max(0, -dlog(loss)/dcomplexity) against the next simpler entry.

    The simplest entry is scored against a complexity-0 baseline: the best
    constant model's loss (or its own loss when no baseline is known).
    """
    scored = []
    prev_loss = baseline_loss if baseline_loss is not None else (frontier[0].loss if frontier else 1.0)
    prev_c = 0
    for cand in sorted(frontier, key=lambda c: c.complexity):
        dlog = math.log(max(cand.loss, LOSS_FLOOR)) - math.log(max(prev_loss, LOSS_FLOOR))
        score = max(0.0, -dlog / (cand.complexity - prev_c))
        scored.append(Candidate(cand.program, cand.loss, score))
        prev_loss, prev_c = cand.loss, cand.complexity
    return scored


def score_and_rank(hof: HallOfFame, top_m: int = 10) -> list[Candidate]:
    """Top-``top_m`` frontier entries by descending score."""
    frontier = hof.frontier()
    if not frontier:
        raise ValueError("hall of fame is empty")
    scored = score_frontier(frontier, hof.baseline_loss)
    scored.sort(key=lambda c: (-c.score, c.complexity, c.loss))
    return scored[:top_m]


def format_table(ranked, digits: int = 5) -> str:
    """Two-column ``Score  Equation`` table."""
    lines = [f"{'Score':<11}Equation"]
    for cand in ranked:
        eq = expr.to_string(cand.program, const_format=lambda v: f"{v:.{digits}g}")
        lines.append(f"{cand.score:<11.3e}{eq}")
    return "\n".join(lines) + "\n"


class _Search:
    """One single-threaded GP run; all randomness comes from ``rng``."""

    def __init__(self, X, y, settings: GPSettings, rng: np.random.Generator):
        self.X = X
        self.y = y
        self.s = settings
        self.rng = rng
        self.n_vars = X.shape[0]
        self.scale = float(np.std(y)) or 1.0
        baseline = float(np.sum((y - y.mean()) ** 2))
        self.baseline = baseline
        self.hof = HallOfFame(settings.max_complexity, baseline)
        self.cache: dict[tuple, float] = {}

    # random trees -----------------------------------------------------------
    def random_constant(self) -> float:
        mag = math.exp(self.rng.normal(0.0, 1.5)) * max(self.scale, 1e-3)
        return float(mag if self.rng.random() < 0.5 else -mag)

    def random_terminal(self):
        if self.rng.random() < 0.5:
            return int(self.rng.integers(self.n_vars))
        return self.random_constant()

    def random_operator(self, arity=None):
        ops = BINARY + UNARY if arity is None else (BINARY if arity == 2 else UNARY)
        # binary operators drawn twice as often as unary ones
        weights = np.array([2.0 if o in BINARY else 1.0 for o in ops])
        return ops[self.rng.choice(len(ops), p=weights / weights.sum())]

    def random_tree(self, depth: int, full: bool) -> tuple:
        if depth <= 0 or (not full and self.rng.random() < 0.3):
            return (self.random_terminal(),)
        op = self.random_operator()
        out = (op,)
        for _ in range(expr.ARITY[op]):
            out += self.random_tree(depth - 1, full)
        return out

    # variation ----------------------------------------------------------------
    def random_subtree(self, program):
        start = int(self.rng.integers(len(program)))
        return start, expr.subtree_end(program, start)

    def crossover(self, a, b):
        i, j = self.random_subtree(a)
        k, l = self.random_subtree(b)
        return a[:i] + b[k:l] + a[j:]

    def subtree_mutation(self, a):
        i, j = self.random_subtree(a)
        return a[:i] + self.random_tree(int(self.rng.integers(1, 4)), False) + a[j:]

    def point_mutation(self, a):
        i = int(self.rng.integers(len(a)))
        tok = a[i]
        if isinstance(tok, str):
            new = self.random_operator(expr.ARITY[tok])
        elif expr.is_var(tok):
            new = self.random_constant()
        elif self.rng.random() < 0.5:
            new = int(self.rng.integers(self.n_vars))
        else:
            new = self.random_constant()
        return a[:i] + (new,) + a[i + 1:]

    def constant_perturbation(self, a):
        idx = constant_indices(a)
        if not idx:
            return self.point_mutation(a)
        i = idx[int(self.rng.integers(len(idx)))]
        factor = math.exp(self.rng.normal(0.0, 0.3))
        new = a[i] * factor
        if self.rng.random() < 0.1:
            new = -new
        return a[:i] + (float(new),) + a[i + 1:]

    # evaluation ---------------------------------------------------------------
    def loss(self, program) -> float:
        v = self.cache.get(program)
        if v is None:
            v = sse(program, self.X, self.y)
            if len(self.cache) > 200_000:
                self.cache.clear()
            self.cache[program] = v
        return v

    def fitness(self, program, loss) -> float:
        rel = max(loss, LOSS_FLOOR) / max(self.baseline, LOSS_FLOOR)
        return math.log(rel) + self.s.parsimony * len(program) if math.isfinite(loss) else math.inf

    def record(self, program, loss):
        if self.hof.update(program, loss) and constant_indices(program):
            prog, l2 = fit_constants(program, self.X, self.y)
            if l2 < loss:
                self.cache[prog] = l2
                self.hof.update(prog, l2)

    def tournament(self, pop, fit):
        idx = self.rng.choice(len(pop), size=self.s.tournament, replace=False)
        best = min(idx, key=lambda i: (fit[i], i))
        return pop[best]

    def run(self, callback=None):
        s = self.s
        pop = []
        for i in range(s.population):
            depth = 1 + i % s.init_max_depth
            pop.append(self.random_tree(depth, full=bool(i % 2)))
        pop = [p if len(p) <= s.max_complexity else (self.random_terminal(),) for p in pop]
        losses = [self.loss(p) for p in pop]
        for p, l in zip(pop, losses):
            self.record(p, l)

        p_total = s.p_crossover + s.p_mutation + s.p_constant
        p_cx = s.p_crossover / p_total
        p_mut = s.p_mutation / p_total
        for it in range(s.iterations):
            fit = [self.fitness(p, l) for p, l in zip(pop, losses)]
            if s.adaptive_parsimony:
                share = np.bincount([len(p) for p in pop], minlength=s.max_complexity + 1) / len(pop)
                fit = [f + s.adaptive_parsimony * share[len(p)] for f, p in zip(fit, pop)]
            children = []
            for _ in range(s.population):
                r = self.rng.random()
                parent = self.tournament(pop, fit)
                if r < p_cx:
                    child = self.crossover(parent, self.tournament(pop, fit))
                elif r < p_cx + p_mut:
                    if self.rng.random() < 0.5:
                        child = self.point_mutation(parent)
                    else:
                        child = self.subtree_mutation(parent)
                else:
                    child = self.constant_perturbation(parent)
                if len(child) > s.max_complexity:
                    child = parent
                children.append(child)
            n_migrants = int(round(s.hof_migration * s.population))
            frontier = self.hof.frontier()
            if frontier and n_migrants:
                for slot in self.rng.choice(s.population, size=n_migrants, replace=False):
                    children[slot] = frontier[int(self.rng.integers(len(frontier)))].program
            pop = children
            losses = []
            for i, p in enumerate(pop):
                l = self.loss(p)
                if self.rng.random() < s.p_optimize and constant_indices(p) and math.isfinite(l):
                    p2, l2 = fit_constants(p, self.X, self.y, max_iter=s.optimize_iters)
                    if l2 < l:
                        self.cache[p2] = l2
                        pop[i], l = p2, l2
                self.record(pop[i], l)
                losses.append(l)
            if callback is not None:
                callback(it, self.hof)
        return self.hof


def search(inputs, targets, settings: GPSettings | None = None, seed: int = 0, callback=None) -> HallOfFame:
    """Run GP symbolic regression of ``targets`` on ``inputs``.

    ``inputs`` is a vector of C_s values (or an ``(n_vars, n)`` array).
    Deterministic given ``seed``.  ``callback(iteration, hof)`` is invoked
    after each generation.
    """
    settings = settings or GPSettings()
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    y = np.asarray(targets, dtype=float).reshape(-1)
    if y.size == 0 or X.shape[1] != y.size:
        raise ValueError("inputs and targets must be nonempty and aligned")
    rng = np.random.Generator(np.random.PCG64(seed))
    return _Search(X, y, settings, rng).run(callback)
