"""Adaptive Runge-Kutta integration of controlled ODEs with piecewise-constant inputs.

The integrator never steps across a control switch: every segment boundary
(and every measurement time) is a hard stop after which integration restarts
with a fresh initial step.  Integration failure is returned as a value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher

DEFAULT_TOLERANCES = (1e-8, 1e-8)

OK = 0
STEP_UNDERFLOW = 1
NON_FINITE = 2
TOO_MANY_STEPS = 3

FAILURE_REASONS = {
    STEP_UNDERFLOW: "step size underflow",
    NON_FINITE: "non-finite state or derivative",
    TOO_MANY_STEPS: "step budget exhausted",
}

# Dormand-Prince 5(4)
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)


@dataclass(frozen=True)
class ControlProfile:
    """Piecewise-constant input with ``N`` equal segments on ``(0, t_end]``.

    Segment ``k`` (1-based) is active on ``((k-1) t_end/N, k t_end/N]``; the
    first coefficient also applies at ``t = 0``.
    """

    coefficients: np.ndarray
    u_min: float
    u_max: float
    t_end: float

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).reshape(-1)
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        if c.size < 1:
            raise ValueError("a control profile needs at least one segment")
        if not self.u_min <= self.u_max:
            raise ValueError(f"invalid bounds [{self.u_min}, {self.u_max}]")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if not np.all(np.isfinite(c)):
            raise ValueError("control coefficients must be finite")
        if np.any(c < self.u_min) or np.any(c > self.u_max):
            raise ValueError(
                f"control coefficients outside [{self.u_min}, {self.u_max}]: {c}"
            )

    @property
    def N(self) -> int:
        return self.coefficients.size

    @classmethod
    def constant(cls, value, N, u_min, u_max, t_end):
        return cls(np.full(N, float(value)), u_min, u_max, t_end)

    def switch_times(self) -> np.ndarray:
        """Segment boundaries ``0, t_end/N, ..., t_end``."""
        return np.arange(self.N + 1) * self.t_end / self.N

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(v) for v in self.coefficients],
            "u_min": float(self.u_min),
            "u_max": float(self.u_max),
            "t_end": float(self.t_end),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControlProfile":
        return cls(np.asarray(d["coefficients"], float), d["u_min"], d["u_max"], d["t_end"])

    def __eq__(self, other):
        if not isinstance(other, ControlProfile):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(self.coefficients.tolist()) + (self.u_min, self.u_max, self.t_end))


def segment_index(N: int, t_end: float, t: float) -> int:
    """0-based index of the segment containing ``t``."""
    if not 0.0 <= t <= t_end:
        raise ValueError(f"t={t} outside [0, {t_end}]")
    if t == 0.0:
        return 0
    s = N * t / t_end
    k = math.ceil(s)
    # boundary times computed as k*t_end/N may land an ulp above k
    if k - s > 1 - 1e-12 * max(1.0, s):
        k -= 1
    return min(max(k, 1), N) - 1


def control_value(profile: ControlProfile, t: float) -> float:
    return float(profile.coefficients[segment_index(profile.N, profile.t_end, t)])


@dataclass(frozen=True)
class IntegrationGrid:
    """Equally spaced measurement times ``t_k = k t_end / N``, ``k = 1..N``."""

    t_end: float
    N: int

    def __post_init__(self):
        if not self.t_end > 0 or self.N < 1:
            raise ValueError("grid needs t_end > 0 and N >= 1")

    @property
    def measurement_times(self) -> np.ndarray:
        return np.arange(1, self.N + 1) * self.t_end / self.N


@dataclass(frozen=True)
class SolveOutcome:
    """Either a trajectory at the measurement times or a failure marker."""

    ok: bool
    times: np.ndarray | None = None
    states: np.ndarray | None = None
    knot_times: np.ndarray | None = field(default=None, repr=False)
    knot_states: np.ndarray | None = field(default=None, repr=False)
    failure_time: float | None = None
    reason: str | None = None

    @classmethod
    def failure(cls, t: float, reason: str) -> "SolveOutcome":
        return cls(ok=False, failure_time=float(t), reason=reason)


def _solve_segments(rhs, args, x0, stops, u_vals, rtol, atol, max_steps):
    """Integrate from ``stops[0]`` through every stop, restarting at each.

    Returns ``(states at stops[1:], status, failure time)``.  Compiled with
    numba for jitted ``rhs``; the plain function handles Python callables.
    """
    n = x0.size
    n_seg = stops.size - 1
    out = np.full((n_seg, n), np.nan)
    x = x0.copy()
    x_new = np.empty(n)
    y = np.empty(n)
    steps = 0
    for s in range(n_seg):
        t = stops[s]
        t_stop = stops[s + 1]
        u = u_vals[s]
        span = t_stop - t
        k1 = rhs(t, x, u, args)
        for i in range(n):
            if not math.isfinite(k1[i]):
                return out, NON_FINITE, t
        # Hairer-Wanner starting step
        d0 = 0.0
        d1 = 0.0
        for i in range(n):
            sc = atol + rtol * abs(x[i])
            d0 += (x[i] / sc) ** 2
            d1 += (k1[i] / sc) ** 2
        d0 = math.sqrt(d0 / n)
        d1 = math.sqrt(d1 / n)
        if d0 < 1e-5 or d1 < 1e-5:
            h = 1e-6
        else:
            h = 0.01 * d0 / d1
        h = min(h, span)
        y1 = x + h * k1
        k2 = rhs(t + h, y1, u, args)
        d2 = 0.0
        for i in range(n):
            sc = atol + rtol * abs(x[i])
            d2 += ((k2[i] - k1[i]) / sc) ** 2
        d2 = math.sqrt(d2 / n) / h
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.2
        h = min(100 * h, h1, span)
        blown_up = False

        while True:
            remaining = t_stop - t
            if remaining <= 1e-14 * max(1.0, abs(t_stop)):
                break
            last = False
            if h >= remaining:
                h = remaining
                last = True
            if h < 1e-12 * max(1.0, abs(t)):
                if blown_up:
                    return out, NON_FINITE, t
                return out, STEP_UNDERFLOW, t
            steps += 1
            if steps > max_steps:
                return out, TOO_MANY_STEPS, t
            # stage arguments are built in place; same operation order as the
            # vectorized form, without per-stage temporaries
            for i in range(n):
                y[i] = x[i] + h * (_A21 * k1[i])
            k2 = rhs(t + _C2 * h, y, u, args)
            for i in range(n):
                y[i] = x[i] + h * (_A31 * k1[i] + _A32 * k2[i])
            k3 = rhs(t + _C3 * h, y, u, args)
            for i in range(n):
                y[i] = x[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
            k4 = rhs(t + _C4 * h, y, u, args)
            for i in range(n):
                y[i] = x[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i] + _A54 * k4[i])
            k5 = rhs(t + _C5 * h, y, u, args)
            for i in range(n):
                y[i] = x[i] + h * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i] + _A64 * k4[i] + _A65 * k5[i])
            k6 = rhs(t + h, y, u, args)
            for i in range(n):
                x_new[i] = x[i] + h * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i] + _B5 * k5[i] + _B6 * k6[i])
            k7 = rhs(t + h, x_new, u, args)
            err = 0.0
            finite = True
            for i in range(n):
                e = h * (
                    _E1 * k1[i]
                    + _E3 * k3[i]
                    + _E4 * k4[i]
                    + _E5 * k5[i]
                    + _E6 * k6[i]
                    + _E7 * k7[i]
                )
                sc = atol + rtol * max(abs(x[i]), abs(x_new[i]))
                err += (e / sc) ** 2
                if not (math.isfinite(x_new[i]) and math.isfinite(k7[i])):
                    finite = False
            err = math.sqrt(err / n)
            if not finite:
                # shrink hard and retry; give up once the step is tiny
                blown_up = True
                h *= 0.25
                continue
            blown_up = False
            if err <= 1.0:
                t = t_stop if last else t + h
                x, x_new = x_new, x
                k1 = k7
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                h = h * fac
            else:
                h = h * max(0.2, 0.9 * err ** -0.2)
        for i in range(n):
            out[s, i] = x[i]
    return out, OK, stops[-1]


# not cached on disk: the rhs argument type is a dispatcher, which numba cannot always pickle
_solve_segments_jit = njit(_solve_segments)


def _stops_and_controls(profile: ControlProfile, grid: IntegrationGrid):
    if not math.isclose(profile.t_end, grid.t_end, rel_tol=1e-12):
        raise ValueError("profile and grid must share t_end")
    stops = np.union1d(profile.switch_times(), np.concatenate([[0.0], grid.measurement_times]))
    # merge times that differ only by rounding
    keep = np.concatenate([[True], np.diff(stops) > 1e-12 * grid.t_end])
    stops = stops[keep]
    mids = 0.5 * (stops[:-1] + stops[1:])
    idx = np.minimum((mids * profile.N / profile.t_end).astype(np.int64), profile.N - 1)
    return stops, profile.coefficients[idx].astype(float)


def integrate(
    rhs,
    x0,
    profile: ControlProfile,
    grid: IntegrationGrid,
    tolerances=DEFAULT_TOLERANCES,
    args=(),
    max_steps: int = 200_000,
) -> SolveOutcome:
    """Integrate ``dx/dt = rhs(t, x, u)`` under ``profile``.

    ``rhs`` is either a plain callable ``rhs(t, x, u)`` or a numba-jitted
    function ``rhs(t, x, u, args)``; the latter runs in compiled code.
    """
    rtol, atol = (float(v) for v in tolerances)
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    x0 = np.array(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    stops, u_vals = _stops_and_controls(profile, grid)

    if isinstance(rhs, CPUDispatcher):
        kernel = _solve_segments_jit
        rhs_args = args
        f = rhs
    else:
        kernel = _solve_segments
        rhs_args = None

        def f(t, x, u, _):
            # copy: stage buffers are reused, so the rhs must not return them
            return np.array(rhs(t, x, u), dtype=float).reshape(-1)

    out, status, t_fail = kernel(f, rhs_args, x0, stops, u_vals, rtol, atol, max_steps)
    if status != OK:
        return SolveOutcome.failure(t_fail, FAILURE_REASONS[status])
    pick = np.searchsorted(stops[1:], grid.measurement_times - 1e-12 * grid.t_end)
    return SolveOutcome(
        ok=True,
        times=grid.measurement_times,
        states=out[pick],
        knot_times=stops[1:],
        knot_states=out,
    )
