import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from missing_physics import ude
from missing_physics.ode import ControlProfile, integrate
from missing_physics.plant import ExperimentRecord, PlantParams, monod, run_experiment, simulate, true_rhs
from missing_physics.ude import N_PARAMS, NetworkParams, UDESettings

P = PlantParams()
K = P.known()


def random_params(seed, scale=0.5):
    return NetworkParams(ude.initial_params(np.random.default_rng(seed), scale))


def noise_free_record(profile, states, seed=0):
    return ExperimentRecord(profile, P.grid.measurement_times, states[:, 0], seed)


def reference_network(Cs):
    """Plain-numpy forward pass following the documented layout."""

    def net(theta, c):
        W1, b1 = theta[0:5].reshape(5, 1), theta[5:10]
        W2, b2 = theta[10:35].reshape(5, 5), theta[35:40]
        W3, b3 = theta[40:45].reshape(1, 5), theta[45]
        h1 = np.tanh(W1[:, 0] * c + b1)
        h2 = np.tanh(W2 @ h1 + b2)
        return 1.0 / (1.0 + np.exp(-(W3 @ h2 + b3)[0]))

    return net


class TestNetwork:
    def test_zero_params(self):
        np.testing.assert_array_equal(ude.network_eval(NetworkParams.zeros(), [0.0, 3.0, 40.0]), 0.5)

    def test_output_bias_saturates(self):
        theta = np.zeros(N_PARAMS)
        theta[45] = 50.0
        assert ude.network_eval(theta, 2.0) > 0.999999

    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
    def test_matches_numpy_reference(self, seed, cs):
        p = random_params(seed, 2.0)
        assert abs(ude.network_eval(p, cs) - reference_network(cs)(p.values, cs)) < 1e-14

    @given(st.integers(0, 2**32 - 1), st.floats(0, 1e3))
    def test_open_unit_interval(self, seed, cs):
        v = ude.network_eval(random_params(seed), cs)
        assert 0.0 < v < 1.0

    def test_deterministic(self):
        p = random_params(4)
        assert ude.network_eval(p, 1.234) == ude.network_eval(p, 1.234)

    def test_nonfinite_input(self):
        with pytest.raises(ValueError):
            ude.network_eval(NetworkParams.zeros(), np.nan)

    def test_layout_and_json(self):
        p = random_params(1)
        assert NetworkParams.from_json(p.to_json()) == p
        d = p.to_dict()
        np.testing.assert_array_equal(np.asarray(d["W2"]).reshape(-1), p.values[10:35])
        with pytest.raises(ValueError):
            NetworkParams(np.zeros(45))
        with pytest.raises(ValueError):
            NetworkParams(np.full(N_PARAMS, np.inf))


class TestRhs:
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 30.0), st.floats(0.0, 5.0), st.floats(0.2, 3.0),
           st.floats(0.0, 0.1))
    def test_substitution_identity(self, seed, cs, cx, v, u):
        # choose mu_max so the plant's Monod law equals the network at this C_s
        p = random_params(seed)
        mu = ude.network_eval(p, cs)
        if cs == 0.0:
            cs = 1e-3
            mu = ude.network_eval(p, cs)
        plant = PlantParams(mu_max=mu * (4.39 + cs) / cs, K_s=4.39)
        assert abs(monod(cs, plant.mu_max, plant.K_s) - mu) < 1e-14
        np.testing.assert_allclose(
            ude.ude_rhs(0.0, [cs, cx, v], u, p, K), true_rhs(0.0, [cs, cx, v], u, plant), rtol=1e-12, atol=1e-14
        )

    @given(st.integers(0, 2**32 - 1), st.floats(0, 30), st.floats(0.1, 3))
    def test_no_biomass_no_feed(self, seed, cs, v):
        np.testing.assert_array_equal(ude.ude_rhs(0.0, [cs, 0.0, v], 0.0, random_params(seed), K), 0.0)

    def test_zero_params_biomass_rate(self):
        cx, v, u = 0.8, 1.3, 0.05
        d = ude.ude_rhs(0.0, [0.01, cx, v], u, NetworkParams.zeros(), K)
        assert abs(d[1] - (0.5 - u / v) * cx) < 1e-15


class TestLoss:
    def profiles(self):
        return [P.zero_profile(), P.profile(np.linspace(0, 0.1, 15)), P.profile(np.full(15, 0.05))]

    def test_self_consistency(self):
        p = random_params(7)
        recs = []
        for prof in self.profiles():
            sol = ude.predict(p, K, prof, P.grid)
            recs.append(noise_free_record(prof, sol.states))
        assert ude.loss(p, recs, constants=K) < 1e-10

    def test_matches_direct_sum(self):
        p = random_params(8)
        recs = [run_experiment(P, prof, i) for i, prof in enumerate(self.profiles())]
        expect = sum(
            np.sum((ude.predict(p, K, r.profile, P.grid).states[:, 0] - r.measured_Cs) ** 2) for r in recs
        )
        assert abs(ude.loss(p, recs, constants=K) - expect) < 1e-10 * expect

    def test_order_invariant(self):
        p = random_params(9)
        recs = [run_experiment(P, prof, i) for i, prof in enumerate(self.profiles())]
        a = ude.loss(p, recs, constants=K)
        b = ude.loss(p, recs[::-1], constants=K)
        assert abs(a - b) <= 1e-12 * a

    def test_failure_gives_worst_value(self):
        rec = run_experiment(P, P.zero_profile(), 0)
        value, grad, ok = ude.TrainingSet([rec], K).evaluate(random_params(0).values, max_steps=5)
        assert value == ude.WORST_LOSS and not ok
        assert not np.any(grad)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_finite_differences(self, seed):
        recs = [run_experiment(P, prof, i) for i, prof in enumerate(self.profiles()[:2])]
        data = ude.TrainingSet(recs, K)
        theta = ude.initial_params(np.random.default_rng(100 + seed))
        _, g = ude.loss_and_grad(theta, data)
        h = 1e-5
        fd = np.empty(N_PARAMS)
        for i in range(N_PARAMS):
            e = np.zeros(N_PARAMS)
            e[i] = h
            fd[i] = (ude.loss(theta + e, data) - ude.loss(theta - e, data)) / (2 * h)
        assert np.max(np.abs(g - fd) / (1 + np.abs(g))) <= 1e-4

    def test_training_set_checks(self):
        with pytest.raises(ValueError):
            ude.TrainingSet([], K)
        other = PlantParams(N=10, t_end=10.0)
        recs = [run_experiment(P, P.zero_profile(), 0), run_experiment(other, other.zero_profile(), 0)]
        with pytest.raises(ValueError):
            ude.TrainingSet(recs, K)


class TestLBFGS:
    def test_rosenbrock(self):
        def fg(x):
            f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
            g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
            return f, g

        res = ude.minimize_lbfgs(fg, np.array([-1.2, 1.0]), max_iter=500, gtol=1e-10, ftol=0.0)
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))

    @given(st.integers(2, 12), st.integers(0, 1000))
    def test_quadratic(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n, n))
        A = A @ A.T + n * np.eye(n)
        b = rng.normal(size=n)
        res = ude.minimize_lbfgs(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(n), gtol=1e-9, ftol=0.0)
        np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-7)


class TestTraining:
    def test_constant_growth_recovery(self):
        # reactor whose true growth law is the constant 0.3, measured without noise
        plant = PlantParams(x0=(5.0, 0.05, 1.0))
        c = plant.known().as_array()

        def rhs(t, x, u):
            Cs, Cx, V = x
            D = u / V
            return np.array([-(0.3 / c[0] + c[1]) * Cx + D * (c[2] - Cs), 0.3 * Cx - D * Cx, u])

        recs = []
        for i, prof in enumerate([plant.profile(np.full(15, 0.1)), plant.profile(np.linspace(0.1, 0.02, 15))]):
            sol = integrate(rhs, plant.x0, prof, plant.grid)
            assert sol.ok and sol.states[:, 0].min() > 0
            recs.append(ExperimentRecord(prof, plant.grid.measurement_times, sol.states[:, 0], i))
        net = ude.train(recs, 3, settings=UDESettings(restarts=2), constants=plant.known())
        visited = np.concatenate([r.measured_Cs for r in recs] + [[plant.x0[0]]])
        grid = np.linspace(visited.min(), visited.max(), 50)
        assert np.max(np.abs(ude.network_eval(net, grid) - 0.3)) < 0.01

    def test_more_restarts_never_worse(self):
        recs = [run_experiment(P, P.zero_profile(), 1)]
        s = UDESettings(max_iter=150)
        one = ude.train(recs, 5, restarts=1, settings=s, constants=K)
        two = ude.train(recs, 5, restarts=2, settings=s, constants=K)
        assert two.loss <= one.loss

    def test_deterministic(self):
        recs = [run_experiment(P, P.zero_profile(), 1)]
        s = UDESettings(max_iter=100, restarts=1)
        a = ude.train(recs, 2, settings=s, constants=K)
        b = ude.train(recs, 2, settings=s, constants=K)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.loss == b.loss

    def test_tracks_zero_feed_experiment(self):
        rec = run_experiment(P, P.zero_profile(), 21)
        net = ude.train([rec], 0, constants=K)
        pred = ude.predict(net, K, rec.profile, P.grid).states[:, 0]
        truth = simulate(P, rec.profile).states[:, 0]
        assert np.sqrt(np.mean((pred - truth) ** 2)) < 2 * P.noise_sd

    def test_invalid_restarts(self):
        with pytest.raises(ValueError):
            ude.train([run_experiment(P, P.zero_profile(), 1)], 0, restarts=0, constants=K)
