import numpy as np
import pytest

from discrepancy_ucb.env import (PENDULUM_SPEC, EnvSpec, LinearGridEnv, NoiseSpec, NoiseStream, PendulumEnv,
                                 PendulumParams, grid_to_csv, linear_env_step, observe_transition, pendulum_rk4,
                                 pendulum_step, resolve_analytic, state_action_grid, wrap_angle)

TRUE = PendulumParams(9.81, 1.0, 1.0)
BIASED = PendulumParams(9.0, 0.5, 2.0)


class TestPendulum:
    def test_equilibrium(self):
        np.testing.assert_array_equal(pendulum_step([0.0, 0.0], [0.0], TRUE), [0.0, 0.0])

    def test_hand_evaluated_euler_step(self):
        out = pendulum_step([np.pi / 2, 0.0], [0.0], TRUE)
        np.testing.assert_allclose(out, [np.pi / 2, -0.05 * 3 * 9.81], rtol=1e-14)
        np.testing.assert_allclose(out[1], -1.4715, rtol=1e-12)

    def test_biased_parameters_differ(self):
        x = [np.pi / 2, 0.0]
        a, b = pendulum_step(x, [0.0], TRUE), pendulum_step(x, [0.0], BIASED)
        assert a[1] != b[1]
        # independent evaluation of the biased update: 3 g sin(theta) / l with g=9, l=2
        np.testing.assert_allclose(b[1], -0.05 * 3 * 9.0 / 2.0, rtol=1e-14)

    def test_outputs_stay_in_bounds(self):
        rng = np.random.default_rng(0)
        x = np.column_stack([rng.uniform(-np.pi, np.pi, 5000), rng.uniform(-8, 8, 5000)])
        u = rng.uniform(-10, 10, size=(5000, 1))
        out = pendulum_step(x, u, TRUE)
        assert np.all(out[:, 0] >= -np.pi) and np.all(out[:, 0] < np.pi)
        assert np.all(np.abs(out[:, 1]) <= 8.0)

    def test_action_is_clipped(self):
        x = np.array([0.3, 1.0])
        np.testing.assert_array_equal(pendulum_step(x, [7.0], TRUE), pendulum_step(x, [2.0], TRUE))

    def test_non_finite_input(self):
        with pytest.raises(ValueError):
            pendulum_step([np.nan, 0.0], [0.0], TRUE)

    def test_euler_is_first_order(self):
        x0, u, horizon = np.array([0.5, 0.3]), 0.4, 0.2
        ref = pendulum_rk4(x0, u, TRUE, horizon, 2000)

        def euler(dt):
            spec = EnvSpec(2, 1, PENDULUM_SPEC.state_bounds, PENDULUM_SPEC.action_bounds, (True, False), dt=dt)
            x = x0
            for _ in range(int(round(horizon / dt))):
                x = pendulum_step(x, [u], TRUE, spec)
            return np.abs(wrap_angle(x - ref)).max()

        errs = [euler(0.02), euler(0.01), euler(0.005)]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        np.testing.assert_allclose(ratios, 2.0, rtol=0.15)


class TestLift:
    def test_seam_crossing_is_continuous(self):
        env = PendulumEnv()
        x, u = np.array([np.pi - 0.01, 4.0]), np.array([0.0])
        y = env.step(x, u)
        assert y[0] < 0                                   # wrapped past the seam
        lifted = env.spec.lift(x, y)
        np.testing.assert_allclose(lifted[0], x[0] + 0.05 * 4.0, rtol=1e-12)
        np.testing.assert_array_equal(env.spec.project_state(lifted), y)

    def test_true_fn_is_lifted_step(self):
        env = PendulumEnv()
        Z = state_action_grid(env.spec, (7, 5, 3))
        raw = env.step(Z[:, :2], Z[:, 2:])
        np.testing.assert_allclose(wrap_angle(env.true_fn(Z)[:, 0] - raw[:, 0]), 0.0, atol=1e-12)
        assert np.all(np.abs(env.true_fn(Z)[:, 0] - Z[:, 0]) <= 0.05 * 8.0 + 1e-12)

    def test_identity_without_wrapped_coordinates(self):
        spec = EnvSpec(1, 1, ((-1.0, 1.0),), ((-1.0, 1.0),))
        np.testing.assert_array_equal(spec.lift([0.9], [-0.9]), [-0.9])


class TestLinear:
    def test_identity(self):
        x = np.array([1.0, -2.0])
        np.testing.assert_array_equal(linear_env_step(x, np.zeros(2), np.eye(2), np.zeros((2, 2))), x)

    def test_scaling(self):
        np.testing.assert_array_equal(linear_env_step([1.0, 1.0], [0.0, 0.0], 0.5 * np.eye(2), np.eye(2)), [0.5, 0.5])

    def test_random_against_matmul(self):
        rng = np.random.default_rng(1)
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
        X, U = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
        expected = np.array([A @ x + B @ u for x, u in zip(X, U)])
        np.testing.assert_allclose(linear_env_step(X, U, A, B), expected, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            linear_env_step([1.0, 2.0], [1.0], np.eye(3), np.eye(3, 1))

    def test_lattice_env(self):
        v = [-2.0, -1.0, 0.0, 1.0, 2.0]
        env = LinearGridEnv([[1.0]], [[1.0]], [v], [v], prior_A=[[0.8]], prior_B=[[1.2]])
        assert env.points.shape == (25, 2)
        np.testing.assert_array_equal(env.step([2.0], [2.0]), [2.0])   # clipped to the lattice
        np.testing.assert_array_equal(env.step([1.0], [-1.0]), [0.0])
        np.testing.assert_allclose(env.prior_step([1.0], [1.0]), [2.0])
        np.testing.assert_array_equal(env.lattice_index(env.points), np.arange(25))
        with pytest.raises(ValueError):
            env.lattice_index([[0.5, 0.0]])


class TestNoise:
    def test_noiseless_observation_is_exact(self):
        env = PendulumEnv()
        x, u = np.array([0.4, -1.0]), np.array([0.7])
        np.testing.assert_array_equal(observe_transition(env, x, u, NoiseStream(NoiseSpec(0.0, 3))), env.step(x, u))

    def test_same_seed_same_draws(self):
        a, b = NoiseStream(NoiseSpec(0.1, 42)), NoiseStream(NoiseSpec(0.1, 42))
        for _ in range(5):
            np.testing.assert_array_equal(a.sample((2,)), b.sample((2,)))
        assert not np.array_equal(NoiseStream(NoiseSpec(0.1, 1)).sample((4,)), NoiseStream(NoiseSpec(0.1, 2)).sample((4,)))

    def test_sample_std(self):
        env = PendulumEnv()
        noise = NoiseStream(NoiseSpec(0.1, 7))
        x, u = np.array([0.1, 0.2]), np.array([0.0])
        ys = np.array([observe_transition(env, x, u, noise) for _ in range(10_000)])
        np.testing.assert_allclose(ys.std(axis=0), 0.1, rtol=0.05)
        assert noise.draws == 10_000

    def test_negative_std(self):
        with pytest.raises(ValueError):
            NoiseSpec(-0.1)


class TestGrid:
    def test_reference_grid_size(self):
        assert state_action_grid(PENDULUM_SPEC, (20, 20, 20)).shape == (8000, 3)

    def test_corners(self):
        spec = EnvSpec(1, 1, ((0.0, 1.0),), ((-1.0, 1.0),))
        g = state_action_grid(spec, (2, 2))
        assert sorted(map(tuple, g)) == [(0.0, -1.0), (0.0, 1.0), (1.0, -1.0), (1.0, 1.0)]

    def test_bounds_are_attained(self):
        g = state_action_grid(PENDULUM_SPEC, (5, 4, 3))
        np.testing.assert_array_equal(g.min(axis=0), PENDULUM_SPEC.bounds[:, 0])
        np.testing.assert_array_equal(g.max(axis=0), PENDULUM_SPEC.bounds[:, 1])

    def test_cap_and_counts(self):
        with pytest.raises(ValueError):
            state_action_grid(PENDULUM_SPEC, (1000, 1000, 1000))
        with pytest.raises(ValueError):
            state_action_grid(PENDULUM_SPEC, (1, 5, 5))

    def test_csv_dump(self):
        text = grid_to_csv(PENDULUM_SPEC, state_action_grid(PENDULUM_SPEC, (2, 2, 2)))
        lines = text.splitlines()
        assert lines[0] == "theta,theta_dot,u"
        assert len(lines) == 9


class TestSpecs:
    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            EnvSpec(1, 1, ((1.0, 0.0),), ((0.0, 1.0),))
        with pytest.raises(ValueError):
            EnvSpec(1, 1, ((0.0, 1.0),), ((0.0, 1.0),), dt=0.0)
        with pytest.raises(ValueError):
            PendulumParams(9.81, 0.0, 1.0)

    def test_analytic_prior_round_trip(self):
        env = PendulumEnv(prior_params=BIASED)
        prior = resolve_analytic(env.analytic_prior().describe())
        Z = state_action_grid(env.spec, (4, 4, 3))
        np.testing.assert_array_equal(prior(Z), env.prior_fn(Z))
