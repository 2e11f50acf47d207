import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numba import njit

from missing_physics.ode import (
    ControlProfile,
    IntegrationGrid,
    control_value,
    integrate,
    segment_index,
)

GRID = IntegrationGrid(15.0, 15)


def zero_profile(N=15, t_end=15.0):
    return ControlProfile.constant(0.0, N, 0.0, 1.0, t_end)


@njit
def decay(t, x, u, args):
    return -x


@njit
def linear_feed(t, x, u, args):
    out = np.empty(1)
    out[0] = u
    return out


@njit
def blowup(t, x, u, args):
    out = np.empty(1)
    out[0] = x[0] * x[0]
    return out


def test_grid_includes_end_excludes_start():
    t = GRID.measurement_times
    assert t[0] == 1.0 and t[-1] == 15.0 and 0.0 not in t
    assert t.size == 15


class TestControlValue:
    def test_zero_profile(self):
        assert control_value(zero_profile(), 7.3) == 0.0

    def test_segment_rule(self):
        c = np.zeros(15)
        c[2] = 0.7  # third segment, (2, 3]
        prof = ControlProfile(c, 0.0, 1.0, 15.0)
        assert control_value(prof, 2.5) == 0.7
        assert control_value(prof, 3.0) == 0.7
        assert control_value(prof, 2.0) == 0.0

    def test_endpoints(self):
        c = np.linspace(0.1, 0.9, 15)
        prof = ControlProfile(c, 0.0, 1.0, 15.0)
        assert control_value(prof, 15.0) == c[-1]
        assert control_value(prof, 0.0) == c[0]

    @pytest.mark.parametrize("t", [-1e-9, 15.000001, math.nan])
    def test_outside_domain(self, t):
        with pytest.raises(ValueError):
            control_value(zero_profile(), t)

    @given(st.integers(1, 40), st.floats(0.5, 100.0), st.floats(0.0, 1.0))
    def test_matches_ceiling_rule(self, N, t_end, frac):
        t = frac * t_end
        k = segment_index(N, t_end, t)
        assert 0 <= k < N
        if t > 0:
            lo, hi = k * t_end / N, (k + 1) * t_end / N
            assert lo - 1e-9 * t_end <= t <= hi + 1e-9 * t_end

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_boundaries_belong_to_left_segment(self, N, k):
        k = min(k, N)
        assert segment_index(N, 15.0, k * 15.0 / N) == k - 1


class TestProfileValidation:
    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            ControlProfile(np.array([0.0, 0.2]), 0.0, 0.1, 1.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            ControlProfile(np.array([np.nan]), 0.0, 0.1, 1.0)

    def test_read_only_coefficients(self):
        prof = zero_profile()
        with pytest.raises(ValueError):
            prof.coefficients[0] = 1.0

    def test_dict_round_trip(self):
        prof = ControlProfile(np.linspace(0, 0.1, 15), 0.0, 0.1, 15.0)
        assert ControlProfile.from_dict(prof.to_dict()) == prof


class TestIntegrate:
    def test_zero_field_is_stationary(self):
        x0 = np.array([1.0, -2.0, 3.5])
        sol = integrate(lambda t, x, u: np.zeros(3), x0, zero_profile(), GRID)
        assert sol.ok
        np.testing.assert_array_equal(sol.states, np.tile(x0, (15, 1)))

    def test_pure_accumulation(self):
        prof = ControlProfile.constant(1.0, 15, 0.0, 1.0, 15.0)
        sol = integrate(linear_feed, [0.0], prof, GRID)
        np.testing.assert_allclose(sol.states[:, 0], GRID.measurement_times, rtol=0, atol=1e-12)

    def test_exponential_decay_oracle(self):
        sol = integrate(decay, [1.0], zero_profile(), GRID, (1e-8, 1e-8))
        err = np.max(np.abs(sol.states[:, 0] - np.exp(-GRID.measurement_times)))
        assert err < 1e-6

    def test_python_and_jitted_rhs_agree(self):
        a = integrate(decay, [1.0], zero_profile(), GRID)
        b = integrate(lambda t, x, u: -x, [1.0], zero_profile(), GRID)
        np.testing.assert_allclose(a.states, b.states, rtol=1e-14, atol=0)

    def test_tighter_tolerance_does_not_hurt(self):
        # below ~1e-6 every segment takes several controlled steps; looser
        # settings take one step per segment and the error is not monotone
        exact = np.exp(-GRID.measurement_times)
        errs = []
        for i in range(12):
            tol = 1e-6 / 2**i
            sol = integrate(decay, [1.0], zero_profile(), GRID, (tol, tol))
            errs.append(np.max(np.abs(sol.states[:, 0] - exact)))
        assert all(b <= a for a, b in zip(errs, errs[1:]))

    def test_linear_system_exact_at_any_tolerance(self):
        prof = ControlProfile.constant(0.5, 15, 0.0, 1.0, 15.0)
        for tol in (1e-4, 1e-6, 1e-8):
            sol = integrate(linear_feed, [0.0], prof, GRID, (tol, tol))
            assert np.max(np.abs(sol.states[:, 0] - 0.5 * GRID.measurement_times)) < 1e-12

    def test_switch_split_identity(self):
        # one switch at t=6: compare against two manual constant-control runs
        c = np.where(np.arange(15) < 6, 0.2, 0.9)
        prof = ControlProfile(c, 0.0, 1.0, 15.0)

        def rhs(t, x, u):
            return np.array([u - 0.3 * x[0], x[0] * u])

        full = integrate(rhs, [1.0, 0.0], prof, GRID)
        first = integrate(rhs, [1.0, 0.0], ControlProfile.constant(0.2, 6, 0, 1, 6.0), IntegrationGrid(6.0, 6))
        second = integrate(
            rhs, first.states[-1], ControlProfile.constant(0.9, 9, 0, 1, 9.0), IntegrationGrid(9.0, 9)
        )
        joined = np.vstack([first.states, second.states])
        assert np.max(np.abs(full.states - joined)) < 1e-10

    def test_volume_is_cumulative_feed(self):
        rng = np.random.default_rng(3)
        c = rng.uniform(0, 0.1, 15)
        prof = ControlProfile(c, 0.0, 0.1, 15.0)
        sol = integrate(linear_feed, [1.0], prof, GRID)
        np.testing.assert_allclose(sol.states[:, 0], 1.0 + np.cumsum(c), atol=1e-10)

    def test_failure_is_a_value(self):
        sol = integrate(blowup, [1.0], zero_profile(), GRID)
        assert not sol.ok
        assert sol.states is None
        assert 0.9 < sol.failure_time <= 1.0 + 1e-6  # exact blow-up at t = 1
        again = integrate(blowup, [1.0], zero_profile(), GRID)
        assert (again.ok, again.failure_time, again.reason) == (sol.ok, sol.failure_time, sol.reason)

    def test_nan_rhs_fails(self):
        sol = integrate(lambda t, x, u: np.array([np.nan]), [1.0], zero_profile(), GRID)
        assert not sol.ok and sol.reason

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            integrate(decay, [np.inf], zero_profile(), GRID)
        with pytest.raises(ValueError):
            integrate(decay, [1.0], zero_profile(), GRID, (0.0, 1e-8))
        with pytest.raises(ValueError):
            integrate(decay, [1.0], zero_profile(t_end=10.0), GRID)

    @given(st.floats(0.05, 2.0), st.floats(-3.0, 3.0))
    def test_decay_rates(self, k, x0):
        sol = integrate(lambda t, x, u: -k * x, [x0], zero_profile(), GRID)
        exact = x0 * np.exp(-k * GRID.measurement_times)
        assert np.max(np.abs(sol.states[:, 0] - exact)) < 1e-6
