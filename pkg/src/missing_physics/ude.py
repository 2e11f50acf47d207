"""Universal differential equation: the reactor model with a neural growth law.

The unknown growth rate is a 1-5-5-1 network (tanh hidden layers, sigmoid
output) fed with raw C_s.  Its 46 parameters are fitted to every C_s
measurement gathered so far by L-BFGS on the summed squared error, with
gradients from forward sensitivity equations integrated alongside the states.

Parameter layout (row-major per layer)::

    [0:5]    W1  (5x1)     [5:10]   b1
    [10:35]  W2  (5x5)     [35:40]  b2
    [40:45]  W3  (1x5)     [45]     b3
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .ode import (
    DEFAULT_TOLERANCES,
    OK,
    ControlProfile,
    IntegrationGrid,
    _solve_segments_jit,
    _stops_and_controls,
    integrate,
)
from .plant import ExperimentRecord, KnownConstants

N_PARAMS = 46
N_HIDDEN = 5
WORST_LOSS = float(np.finfo(float).max)

LAYOUT = {
    "W1": (0, 5, (5, 1)),
    "b1": (5, 10, (5,)),
    "W2": (10, 35, (5, 5)),
    "b2": (35, 40, (5,)),
    "W3": (40, 45, (1, 5)),
    "b3": (45, 46, (1,)),
}


@dataclass
class NetworkParams:
    values: np.ndarray
    loss: float | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != N_PARAMS:
            raise ValueError(f"expected {N_PARAMS} parameters, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("network parameters must be finite")
        self.values = v

    @classmethod
    def zeros(cls) -> "NetworkParams":
        return cls(np.zeros(N_PARAMS))

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        d = {"architecture": "1-5-5-1 tanh/tanh/sigmoid", "layout": "row-major per layer"}
        for name, (lo, hi, shape) in LAYOUT.items():
            d[name] = self.values[lo:hi].reshape(shape).tolist()
        d["loss"] = self.loss
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        v = np.concatenate([np.asarray(d[name], float).reshape(-1) for name in LAYOUT])
        return cls(v, d.get("loss"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NetworkParams":
        return cls.from_dict(json.loads(text))


@njit(cache=True)
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _nn_forward(theta, cs):
    a1 = np.empty(N_HIDDEN)
    for j in range(N_HIDDEN):
        a1[j] = math.tanh(theta[j] * cs + theta[5 + j])
    z3 = theta[45]
    for j in range(N_HIDDEN):
        z = theta[35 + j]
        for k in range(N_HIDDEN):
            z += theta[10 + 5 * j + k] * a1[k]
        z3 += theta[40 + j] * math.tanh(z)
    return _sigmoid(z3)


@njit(cache=True)
def _nn_with_derivatives(theta, cs):
    """Output, d/dC_s and d/dtheta of the network at ``cs``."""
    a1 = np.empty(N_HIDDEN)
    a2 = np.empty(N_HIDDEN)
    for j in range(N_HIDDEN):
        a1[j] = math.tanh(theta[j] * cs + theta[5 + j])
    z3 = theta[45]
    for j in range(N_HIDDEN):
        z = theta[35 + j]
        for k in range(N_HIDDEN):
            z += theta[10 + 5 * j + k] * a1[k]
        a2[j] = math.tanh(z)
        z3 += theta[40 + j] * a2[j]
    y = _sigmoid(z3)
    dy = y * (1.0 - y)

    grad = np.empty(N_PARAMS)
    grad[45] = dy
    d2 = np.empty(N_HIDDEN)
    for j in range(N_HIDDEN):
        grad[40 + j] = dy * a2[j]
        d2[j] = dy * theta[40 + j] * (1.0 - a2[j] * a2[j])
        grad[35 + j] = d2[j]
        for k in range(N_HIDDEN):
            grad[10 + 5 * j + k] = d2[j] * a1[k]
    dcs = 0.0
    for k in range(N_HIDDEN):
        back = 0.0
        for j in range(N_HIDDEN):
            back += theta[10 + 5 * j + k] * d2[j]
        d1 = back * (1.0 - a1[k] * a1[k])
        grad[5 + k] = d1
        grad[k] = d1 * cs
        dcs += d1 * theta[k]
    return y, dcs, grad


@njit(cache=True)
def _ude_rhs(t, x, u, args):
    theta, c = args
    Cs, Cx, V = x[0], x[1], x[2]
    out = np.empty(3)
    if not V > 0.0:
        out[:] = np.nan
        return out
    mu = _nn_forward(theta, Cs)
    D = u / V
    out[0] = -(mu / c[0] + c[1]) * Cx + D * (c[2] - Cs)
    out[1] = mu * Cx - D * Cx
    out[2] = u
    return out


@njit(cache=True)
def _ude_sens_rhs(t, y, u, args):
    # y = [C_s, C_x, V, S (3 x 46, row-major)] with S = dx/dtheta
    theta, c = args
    Cs, Cx, V = y[0], y[1], y[2]
    out = np.empty(3 + 3 * N_PARAMS)
    if not V > 0.0:
        out[:] = np.nan
        return out
    mu, dmu, gmu = _nn_with_derivatives(theta, Cs)
    D = u / V
    yxs, m, cin = c[0], c[1], c[2]
    out[0] = -(mu / yxs + m) * Cx + D * (cin - Cs)
    out[1] = mu * Cx - D * Cx
    out[2] = u
    j00 = -dmu / yxs * Cx - D
    j01 = -(mu / yxs + m)
    j02 = -u * (cin - Cs) / (V * V)
    j10 = dmu * Cx
    j11 = mu - D
    j12 = u * Cx / (V * V)
    for p in range(N_PARAMS):
        s0 = y[3 + p]
        s1 = y[3 + N_PARAMS + p]
        s2 = y[3 + 2 * N_PARAMS + p]
        out[3 + p] = j00 * s0 + j01 * s1 + j02 * s2 - Cx / yxs * gmu[p]
        out[3 + N_PARAMS + p] = j10 * s0 + j11 * s1 + j12 * s2 + Cx * gmu[p]
        out[3 + 2 * N_PARAMS + p] = 0.0
    return out


@njit
def _loss_kernel(theta, consts, x0, stops, u_vals, pick, meas, rtol, atol, max_steps, with_grad):
    args = (theta, consts)
    total = 0.0
    grad = np.zeros(N_PARAMS)
    if with_grad:
        y0 = np.zeros(3 + 3 * N_PARAMS)
        y0[:3] = x0
    for e in range(u_vals.shape[0]):
        if with_grad:
            out, status, _ = _solve_segments_jit(
                _ude_sens_rhs, args, y0, stops, u_vals[e], rtol, atol, max_steps
            )
        else:
            out, status, _ = _solve_segments_jit(
                _ude_rhs, args, x0, stops, u_vals[e], rtol, atol, max_steps
            )
        if status != OK:
            return WORST_LOSS, np.zeros(N_PARAMS), False
        for k in range(pick.size):
            r = out[pick[k], 0] - meas[e, k]
            total += r * r
            if with_grad:
                for p in range(N_PARAMS):
                    grad[p] += 2.0 * r * out[pick[k], 3 + p]
    if not math.isfinite(total):
        return WORST_LOSS, np.zeros(N_PARAMS), False
    return total, grad, True


def network_eval(params, Cs):
    """Network growth-rate prediction at ``Cs`` (scalar or array)."""
    theta = _theta(params)
    Cs = np.asarray(Cs, dtype=float)
    if not np.all(np.isfinite(Cs)):
        raise ValueError("network input must be finite")
    out = np.array([_nn_forward(theta, float(c)) for c in Cs.reshape(-1)])
    return float(out[0]) if Cs.ndim == 0 else out.reshape(Cs.shape)


def ude_rhs(t, state, u, params, constants: KnownConstants) -> np.ndarray:
    return _ude_rhs(float(t), np.asarray(state, float), float(u), (_theta(params), constants.as_array()))


def _theta(params) -> np.ndarray:
    if isinstance(params, NetworkParams):
        return params.values
    return NetworkParams(params).values


class TrainingSet:
    """All experiments gathered so far, packed for the compiled loss."""

    def __init__(self, records, constants: KnownConstants):
        records = list(records)
        if not records:
            raise ValueError("training set is empty")
        first = records[0]
        grid = IntegrationGrid(first.profile.t_end, first.measurement_times.size)
        for r in records:
            if not np.allclose(r.measurement_times, grid.measurement_times, rtol=1e-12, atol=0):
                raise ValueError("records do not share a measurement grid")
            if r.profile.N != first.profile.N or r.profile.t_end != first.profile.t_end:
                raise ValueError("records do not share a control layout")
        self.records = records
        self.constants = constants
        self.grid = grid
        packed = [_stops_and_controls(r.profile, grid) for r in records]
        self.stops = packed[0][0]
        self.u_vals = np.stack([p[1] for p in packed])
        self.pick = np.searchsorted(self.stops[1:], grid.measurement_times - 1e-12 * grid.t_end)
        self.meas = np.stack([r.measured_Cs for r in records])
        self.x0 = np.array(constants.x0, dtype=float)
        self.consts = constants.as_array()

    def __len__(self):
        return len(self.records)

    def evaluate(self, theta, tolerances=DEFAULT_TOLERANCES, with_grad=False, max_steps=200_000):
        rtol, atol = tolerances
        return _loss_kernel(
            np.ascontiguousarray(theta, dtype=float),
            self.consts,
            self.x0,
            self.stops,
            self.u_vals,
            self.pick,
            self.meas,
            float(rtol),
            float(atol),
            max_steps,
            with_grad,
        )


def _as_training_set(data, constants=None) -> TrainingSet:
    if isinstance(data, TrainingSet):
        return data
    if constants is None:
        raise ValueError("known constants are required to build a training set")
    return TrainingSet(data, constants)


def loss(params, data, tolerances=DEFAULT_TOLERANCES, constants=None) -> float:
    """Summed squared C_s error over every experiment; failure gives WORST_LOSS."""
    value, _, _ = _as_training_set(data, constants).evaluate(_theta(params), tolerances)
    return float(value)


def loss_and_grad(params, data, tolerances=DEFAULT_TOLERANCES, constants=None):
    value, grad, _ = _as_training_set(data, constants).evaluate(
        _theta(params), tolerances, with_grad=True
    )
    return float(value), grad


def predict(params, constants: KnownConstants, profile: ControlProfile, grid: IntegrationGrid,
            tolerances=DEFAULT_TOLERANCES):
    """UDE state trajectory at the measurement times."""
    return integrate(
        _ude_rhs, constants.x0, profile, grid, tolerances,
        args=(_theta(params), constants.as_array()),
    )


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    n_iter: int
    n_evals: int
    message: str
    history: list = field(default_factory=list, repr=False)


def minimize_lbfgs(fun_and_grad, x0, max_iter=2000, gtol=1e-7, ftol=1e-10, memory=10,
                   max_backtracks=40, c1=1e-4):
    """L-BFGS with the two-loop recursion and an Armijo backtracking search.

    Stops when ``max|g| < gtol``, when the relative decrease of ``f`` drops
    below ``ftol``, or after ``max_iter`` iterations.  Accepted steps never
    increase ``f``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_and_grad(x)
    n_evals = 1
    history = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    message = "max_iter reached"
    it = 0
    if f >= WORST_LOSS:
        return LBFGSResult(x, f, 0, n_evals, "initial point failed", history)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            message = "gradient tolerance reached"
            it -= 1
            break
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
        else:
            gamma = min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        r = gamma * q
        for s, y, rho, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
            b = rho * np.dot(y, r)
            r += s * (a - b)
        d = -r
        slope = np.dot(g, d)
        if not slope < 0:
            # lost descent: drop the curvature memory
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g * min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
            slope = np.dot(g, d)

        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun_and_grad(x_new)
            n_evals += 1
            if f_new <= f + c1 * step * slope and np.isfinite(f_new):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            message = "line search failed"
            it -= 1
            break

        s = x_new - x
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        rel = abs(f - f_new) / max(abs(f), abs(f_new), 1e-300)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if rel < ftol:
            message = "relative loss change below tolerance"
            break
    return LBFGSResult(x, f, it, n_evals, message, history)


@dataclass(frozen=True)
class UDESettings:
    restarts: int = 4
    max_iter: int = 2000
    gtol: float = 1e-7
    ftol: float = 1e-10
    init_scale: float = 0.5
    rtol: float = 1e-8
    atol: float = 1e-8

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @property
    def tolerances(self):
        return (self.rtol, self.atol)


def initial_params(rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
    """Weights uniform on [-scale, scale], biases zero."""
    theta = np.zeros(N_PARAMS)
    for name in ("W1", "W2", "W3"):
        lo, hi, _ = LAYOUT[name]
        theta[lo:hi] = rng.uniform(-scale, scale, hi - lo)
    return theta


def train(data, init_seed: int, restarts: int | None = None, settings: UDESettings | None = None,
          constants: KnownConstants | None = None) -> NetworkParams:
    """Fit the network from ``restarts`` random starts; keep the lowest loss."""
    settings = settings or UDESettings()
    if restarts is None:
        restarts = settings.restarts
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    ts = _as_training_set(data, constants)
    tol = settings.tolerances

    def fg(theta):
        value, grad, _ = ts.evaluate(theta, tol, with_grad=True)
        return value, grad

    rng = np.random.Generator(np.random.PCG64(init_seed))
    best = None
    for _ in range(restarts):
        theta0 = initial_params(rng, settings.init_scale)
        res = minimize_lbfgs(fg, theta0, settings.max_iter, settings.gtol, settings.ftol)
        if res.fun < WORST_LOSS and np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise RuntimeError("every training restart failed to produce a finite loss")
    return NetworkParams(best.x, float(best.fun))
