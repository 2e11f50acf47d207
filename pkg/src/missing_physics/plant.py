"""Ground-truth fed-batch bioreactor with Monod kinetics and noisy C_s sensor.

This is the only module that knows the true growth law.  Everything the
learning side may use is exposed through :meth:`PlantParams.known`.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .ode import DEFAULT_TOLERANCES, ControlProfile, IntegrationGrid, integrate


@dataclass(frozen=True)
class KnownConstants:
    """Known part of the reactor model: everything except the growth law."""

    y_xs: float
    m: float
    C_s_in: float
    x0: tuple[float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([self.y_xs, self.m, self.C_s_in])


@dataclass(frozen=True)
class PlantParams:
    mu_max: float = 0.421
    K_s: float = 4.39
    y_xs: float = 0.5
    m: float = 0.01
    C_s_in: float = 50.0
    x0: tuple[float, float, float] = (1.0, 0.5, 1.0)
    noise_sd: float = 0.1
    t_end: float = 15.0
    N: int = 15
    u_min: float = 0.0
    u_max: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if len(self.x0) != 3:
            raise ValueError("x0 must hold (C_s, C_x, V)")
        for name in ("mu_max", "K_s", "y_xs", "C_s_in"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.x0[2] > 0:
            raise ValueError("initial volume must be positive")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be nonnegative")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        object.__setattr__(self, "N", int(self.N))
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if not self.u_min <= self.u_max:
            raise ValueError("u_min must not exceed u_max")

    @property
    def grid(self) -> IntegrationGrid:
        return IntegrationGrid(self.t_end, self.N)

    def known(self) -> KnownConstants:
        return KnownConstants(self.y_xs, self.m, self.C_s_in, self.x0)

    def zero_profile(self) -> ControlProfile:
        return ControlProfile.constant(0.0, self.N, self.u_min, self.u_max, self.t_end)

    def profile(self, coefficients) -> ControlProfile:
        return ControlProfile(np.asarray(coefficients, float), self.u_min, self.u_max, self.t_end)


def monod(Cs, mu_max=0.421, K_s=4.39):
    """Monod growth rate ``mu_max * Cs / (K_s + Cs)``."""
    Cs = np.asarray(Cs, dtype=float)
    if np.any(Cs < 0):
        raise ValueError("substrate concentration must be nonnegative")
    out = mu_max * Cs / (K_s + Cs)
    return float(out) if out.ndim == 0 else out


@njit(cache=True)
def _plant_rhs(t, x, u, p):
    # p = (mu_max, K_s, y_xs, m, C_s_in)
    Cs, Cx, V = x[0], x[1], x[2]
    out = np.empty(3)
    if not V > 0.0:
        out[:] = np.nan
        return out
    mu = p[0] * Cs / (p[1] + Cs)
    D = u / V
    out[0] = -(mu / p[2] + p[3]) * Cx + D * (p[4] - Cs)
    out[1] = mu * Cx - D * Cx
    out[2] = u
    return out


def _param_array(params: PlantParams) -> np.ndarray:
    return np.array([params.mu_max, params.K_s, params.y_xs, params.m, params.C_s_in])


def true_rhs(t, state, u, params: PlantParams) -> np.ndarray:
    """Reactor derivative under the true growth law.

    A non-positive volume returns an all-NaN derivative, which the
    integrator reports as a failure.
    """
    return _plant_rhs(float(t), np.asarray(state, float), float(u), _param_array(params))


def simulate(params: PlantParams, profile: ControlProfile, tolerances=DEFAULT_TOLERANCES):
    """Noise-free true trajectory at the measurement times."""
    return integrate(
        _plant_rhs, params.x0, profile, params.grid, tolerances, args=_param_array(params)
    )


@dataclass
class ExperimentRecord:
    profile: ControlProfile
    measurement_times: np.ndarray
    measured_Cs: np.ndarray
    rng_seed: int
    label: str = field(default="", compare=False)

    def __post_init__(self):
        self.measurement_times = np.asarray(self.measurement_times, float)
        self.measured_Cs = np.asarray(self.measured_Cs, float)
        if self.measurement_times.shape != self.measured_Cs.shape:
            raise ValueError("measurement times and values differ in length")
        if self.measured_Cs.ndim != 1:
            raise ValueError("measurements must be a vector")
        if not np.all(np.isfinite(self.measured_Cs)):
            raise ValueError("measurements must be finite")

    def __eq__(self, other):
        if not isinstance(other, ExperimentRecord):
            return NotImplemented
        return (
            self.profile == other.profile
            and np.array_equal(self.measurement_times, other.measurement_times)
            and np.array_equal(self.measured_Cs, other.measured_Cs)
            and self.rng_seed == other.rng_seed
        )

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "measurement_times": [float(v) for v in self.measurement_times],
            "measured_Cs": [float(v) for v in self.measured_Cs],
            "rng_seed": int(self.rng_seed),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(
            ControlProfile.from_dict(d["profile"]),
            d["measurement_times"],
            d["measured_Cs"],
            int(d["rng_seed"]),
            d.get("label", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentRecord":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_k", "measured_Cs"])
        for t, y in zip(self.measurement_times, self.measured_Cs):
            w.writerow([repr(float(t)), repr(float(y))])
        return buf.getvalue()


def measurement_noise(seed: int, n: int, sd: float) -> np.ndarray:
    """I.i.d. N(0, sd^2) draws from a PCG64 stream (numpy ziggurat normals)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return sd * rng.standard_normal(n)


def run_experiment(
    params: PlantParams,
    profile: ControlProfile,
    seed: int,
    tolerances=DEFAULT_TOLERANCES,
) -> ExperimentRecord:
    """Run the virtual reactor under ``profile`` and measure C_s with noise."""
    if profile.N != params.N or profile.t_end != params.t_end:
        raise ValueError("profile does not match the plant's experiment layout")
    if profile.u_min < params.u_min or profile.u_max > params.u_max:
        raise ValueError("profile bounds exceed the plant's admissible range")
    sol = simulate(params, profile, tolerances)
    if not sol.ok:
        raise RuntimeError(
            f"true plant failed to integrate at t={sol.failure_time} ({sol.reason}); "
            "check the plant configuration"
        )
    noise = measurement_noise(seed, params.N, params.noise_sd)
    return ExperimentRecord(profile, sol.times.copy(), sol.states[:, 0] + noise, int(seed))
