import math

import numpy as np
import pytest

from discrepancy_ucb.env import PendulumEnv, pendulum_step, state_action_grid, wrap_angle
from discrepancy_ucb.gp import GpModel, RBFKernel
from discrepancy_ucb.metrics import (CSV_COLUMNS, CampaignRecord, EpisodeRow, InsufficientEpisodesError,
                                     aggregate_csv, control_score, first_episode_below, max_variance_over_grid,
                                     mse_over_grid, read_csv_rows, record_to_csv, relative_control_performance,
                                     theorem1_bound_episode, theorem1_time, theorem1_time_ode, verify_convergence,
                                     visited_discrepancy)


def record(max_vars, baseline=1.0):
    r = CampaignRecord(baseline=EpisodeRow(0, baseline, 0.0))
    for i, v in enumerate(max_vars, start=1):
        r.append(EpisodeRow(i, v, 0.5 / i, 0.1 * i, True))
    return r


class TestGridMetrics:
    def test_empty_model_variance_is_one(self):
        env = PendulumEnv()
        model = GpModel.empty(RBFKernel(0.5, env.spec.kernel_wrap_mask), env.analytic_prior(), 0.01, 3)
        assert max_variance_over_grid(model, env.test_grid((5, 5, 5))) == 1.0

    def test_observing_every_grid_point(self):
        env = PendulumEnv()
        grid = env.test_grid((4, 4, 3))
        model = GpModel.fit(RBFKernel(0.5, env.spec.kernel_wrap_mask), env.analytic_prior(), 1e-6,
                            grid, env.true_fn(grid))
        assert max_variance_over_grid(model, grid) < 1e-4

    def test_matches_scan_across_chunks(self):
        env = PendulumEnv()
        rng = np.random.default_rng(0)
        X = env.test_grid((3, 3, 3)) + rng.normal(scale=0.3, size=(27, 3))
        model = GpModel.fit(RBFKernel(0.5), env.analytic_prior(), 0.01, X, env.true_fn(X))
        grid = env.test_grid((9, 9, 5))
        scan = max(float(model.predict_variance(z)) for z in grid)
        assert max_variance_over_grid(model, grid, chunk=17) == pytest.approx(scan, abs=1e-14)

    def test_mse_perfect_prior_is_exactly_zero(self):
        env = PendulumEnv()
        model = GpModel.empty(RBFKernel(0.5), env.true_prior(), 0.01, 3)
        assert mse_over_grid(model, env.true_fn, env.test_grid((10, 10, 10))) == 0.0

    def test_mse_of_biased_prior(self):
        env = PendulumEnv()
        grid = state_action_grid(env.spec, (8, 8, 5))
        model = GpModel.empty(RBFKernel(0.5), env.analytic_prior(), 0.01, 3)
        a = pendulum_step(grid[:, :2], grid[:, 2:], env.prior_params)
        b = pendulum_step(grid[:, :2], grid[:, 2:], env.true_params)
        diff = np.column_stack([wrap_angle(a[:, 0] - b[:, 0]), a[:, 1] - b[:, 1]])
        expected = np.mean(np.sum(diff**2, axis=1))
        assert mse_over_grid(model, env.true_fn, grid, chunk=50) == pytest.approx(expected, rel=1e-12)

    def test_empty_grid(self):
        env = PendulumEnv()
        model = GpModel.empty(RBFKernel(0.5), env.analytic_prior(), 0.01, 3)
        with pytest.raises(ValueError):
            max_variance_over_grid(model, np.empty((0, 3)))


class TestVisitedDiscrepancy:
    def test_perfect_prior(self):
        env = PendulumEnv()
        pts = env.test_grid((3, 3, 3))
        assert visited_discrepancy(env.true_fn, env.true_fn, pts) == 0.0

    def test_single_point(self):
        env = PendulumEnv()
        z = np.array([[0.4, -2.0, 1.0]])
        expected = np.linalg.norm(env.prior_fn(z)[0] - env.true_fn(z)[0])
        assert visited_discrepancy(env.prior_fn, env.true_fn, z) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("norm", ["l2", "l1", "linf"])
    def test_three_point_hand_sum(self, norm):
        def p0(z):
            return np.zeros((len(z), 2))

        def truth(z):
            return np.array([[3.0, 4.0], [1.0, -1.0], [0.0, 2.0]])

        per_point = {"l2": [5.0, np.sqrt(2.0), 2.0], "l1": [7.0, 2.0, 2.0], "linf": [4.0, 1.0, 2.0]}[norm]
        assert visited_discrepancy(p0, truth, np.zeros((3, 3)), norm) == pytest.approx(sum(per_point) / 3)


class TestTheoremRate:
    def test_worked_example(self):
        assert theorem1_time(25, 10, 0.5) == pytest.approx(25 * 24.5 / 50 + 25 * math.log(50), rel=1e-14)
        assert theorem1_time(25, 10, 0.5) == pytest.approx(110.05, abs=0.01)

    def test_limit_at_nz(self):
        assert theorem1_time(25, 10, 25 - 1e-9) == pytest.approx(0.0, abs=1e-7)

    def test_strictly_decreasing(self):
        eps = np.linspace(0.01, 24.9, 200)
        t = [theorem1_time(25, 5, e) for e in eps]
        assert np.all(np.diff(t) < 0)

    @pytest.mark.parametrize("eps", [0.5, 0.25, 0.1, 3.0])
    def test_ode_cross_check(self, eps):
        closed, ode = theorem1_time(25, 5, eps), theorem1_time_ode(25, 5, eps)
        assert abs(ode - closed) <= 0.01 * closed

    def test_bound_episodes(self):
        assert [theorem1_bound_episode(25, 5, e) for e in (0.5, 0.25, 0.1)] == [147, 215, 388]

    @pytest.mark.parametrize("eps", [0.0, -1.0, 25.0, 30.0])
    def test_out_of_range(self, eps):
        with pytest.raises(ValueError):
            theorem1_time(25, 5, eps)
        with pytest.raises(ValueError):
            theorem1_time_ode(25, 5, eps)


class TestVerifyConvergence:
    def test_large_eps_trivially_true(self):
        assert verify_convergence(record([1.0]), 25, 5, 2.0)

    def test_empty_rows(self):
        with pytest.raises(InsufficientEpisodesError, match="insufficient episodes"):
            verify_convergence(CampaignRecord(baseline=EpisodeRow(0, 1.0, 0.0)), 25, 5, 0.5)

    def test_too_short(self):
        with pytest.raises(InsufficientEpisodesError):
            verify_convergence(record([0.9] * 10), 25, 5, 0.5)

    def test_reads_start_of_bound_episode(self):
        bound = theorem1_bound_episode(25, 5, 0.5)
        curve = [0.9] * (bound - 2) + [0.4]
        assert verify_convergence(record(curve), 25, 5, 0.5)
        curve[-1] = 0.6
        assert not verify_convergence(record(curve), 25, 5, 0.5)

    def test_first_episode_below(self):
        r = record([0.8, 0.3, 0.1])
        assert first_episode_below(r, 2.0) == 1
        assert first_episode_below(r, 0.5) == 3
        assert first_episode_below(r, 0.1) == 4
        assert first_episode_below(r, 0.01) is None


class TestControlScore:
    def test_examples(self):
        np.testing.assert_array_equal(control_score([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(control_score([1, 2, 3]), [1, 3, 6])

    def test_fold_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            r = rng.normal(size=rng.integers(1, 50))
            acc, trace = 0.0, []
            for v in r:
                acc += v
                trace.append(acc)
            np.testing.assert_allclose(control_score(r), trace, rtol=1e-12)

    def test_relative_performance(self):
        assert relative_control_performance([8.0], [10.0]) == pytest.approx(0.8)
        assert relative_control_performance([-2.0, -20.0], [-1.0, -10.0]) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            relative_control_performance([1.0], [-1.0])


class TestCsv:
    def test_schema_and_round_trip(self):
        r = record([0.8, 0.5])
        r.rows[1].wall_time_s = 1.25
        text = record_to_csv(r)
        assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
        assert "\r" not in text
        rows = read_csv_rows(text)
        assert [row["tau"] for row in rows] == ["1", "2"]
        assert float(rows[0]["max_variance"]) == 0.8
        assert rows[0]["assumption3_held"] == "true"
        assert rows[1]["wall_time_s"] == "1.25"
        assert read_csv_rows(record_to_csv(r, include_timing=False))[1]["wall_time_s"] == "nan"

    def test_rows_must_be_consecutive(self):
        r = record([0.8])
        with pytest.raises(ValueError):
            r.append(EpisodeRow(3, 0.5, 0.1))

    def test_aggregate(self):
        a, b = record([0.8, 0.5]), record([0.6, 0.1])
        rows = aggregate_csv([a, b]).splitlines()
        assert rows[0].split(",")[:4] == ["tau", "max_variance_mean", "max_variance_min", "max_variance_max"]
        first = [float(v) for v in rows[1].split(",")[1:4]]
        np.testing.assert_allclose(first, [0.7, 0.6, 0.8])
        assert len(rows) == 3
        with pytest.raises(ValueError):
            aggregate_csv([a, record([0.5])])

    def test_dict_round_trip(self):
        r = record([0.8, 0.5])
        r.meta["seed"] = 4
        back = CampaignRecord.from_dict(r.to_dict())
        assert record_to_csv(back) == record_to_csv(r) and back.meta == r.meta
