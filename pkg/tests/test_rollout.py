"""Trajectory simulation: noise layout, replay equality against a scalar
re-implementation, pathwise gradients against finite differences under common
random numbers, truncation modes, worker invariance, and failure paths.
"""

import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from distmatch import (
    EnvSpec,
    GoodEventConfig,
    PolicyConfig,
    RandomStream,
    evaluate,
    init_params,
    reward,
    simulate_batch,
    simulate_policy_fn,
    step,
)
from distmatch.errors import DivergenceError, MemoryBudgetError, ParameterError
from distmatch.rollout import dump_trajectories


def randomized(config, rng, spread=0.5):
    base = init_params(config)
    return base.with_theta(base.theta + spread * rng.standard_normal(base.n_params))


def replay_trajectory(env, params, z_row, eps_row):
    """Scalar re-simulation from recorded noise; independent of the batched
    recursion in the library."""
    T = env.horizon
    s = float(env.s0)
    R = 0.0
    states, actions = [s], []
    for t in range(T):
        if params.config.time_encoding == "tau":
            tau = (T - t) / T
        else:
            tau = t / T
        a = evaluate(params, s, R, float(z_row[t]), tau).action
        a = float(np.clip(a, env.a_min, env.a_max)) if env.a_min is not None else a
        actions.append(a)
        R += float(reward(env, t, s, a).value)
        s = float(step(env, t, s, a, float(eps_row[t])).next_state)
        states.append(s)
    if env.has_terminal_reward:
        R += float(reward(env, T, s, 0.0).value)
    return np.array(states), np.array(actions), R


class TestNoiseLayout:
    def test_block_per_trajectory_interleaving(self):
        env = EnvSpec.lq(horizon=4)
        params = init_params(PolicyConfig(width=3, seed=1))
        stream = RandomStream(99, 2)
        batch = simulate_batch(env, params, 6, stream,
                               GoodEventConfig(mode="off"))
        for j in range(6):
            raw = stream.generator(block=j).standard_normal(2 * env.horizon)
            assert np.array_equal(batch.z[j], raw[0::2])
            assert np.array_equal(batch.eps[j], raw[1::2])

    def test_batch_is_pure_function_of_stream(self):
        env = EnvSpec.lq(horizon=3)
        params = randomized(PolicyConfig(width=4), np.random.default_rng(0))
        one = simulate_batch(env, params, 32, RandomStream(7, 1), GoodEventConfig())
        two = simulate_batch(env, params, 32, RandomStream(7, 1), GoodEventConfig())
        assert np.array_equal(one.R_T, two.R_T)
        assert np.array_equal(one.grad_R, two.grad_R)
        other = simulate_batch(env, params, 32, RandomStream(7, 2), GoodEventConfig())
        assert not np.array_equal(one.R_T, other.R_T)


class TestReplayEquality:
    @pytest.mark.parametrize("make_env,config", [
        (lambda: EnvSpec.lq(horizon=5),
         PolicyConfig(width=4, seed=3)),
        (lambda: EnvSpec.wealth(horizon=4),
         PolicyConfig(architecture="residual-mlp", width=6, blocks=1,
                      layer_norm=True, output_squash=(0.0, 200.0), seed=4)),
        (lambda: EnvSpec.cosine(horizon=2),
         PolicyConfig(width=4, seed=5, time_encoding="t-over-T")),
        (lambda: EnvSpec.torus(horizon=3),
         PolicyConfig(width=4, seed=6)),
    ])
    def test_states_actions_rewards_match_scalar_replay(self, make_env, config):
        env = make_env()
        params = randomized(config, np.random.default_rng(8))
        batch = simulate_batch(env, params, 8, RandomStream(11, 0),
                               GoodEventConfig())
        for j in range(batch.M):
            states, actions, R_T = replay_trajectory(
                env, params, batch.z[j], batch.eps[j]
            )
            assert_allclose(batch.s[j], states, rtol=1e-12, atol=1e-12)
            assert_allclose(batch.a[j], actions, rtol=1e-12, atol=1e-12)
            assert_allclose(batch.R_T[j], R_T, rtol=1e-12, atol=1e-12)

    def test_running_reward_starts_at_zero_and_accumulates(self):
        env = EnvSpec.lq(horizon=4)
        params = randomized(PolicyConfig(width=3), np.random.default_rng(1))
        batch = simulate_batch(env, params, 5, RandomStream(1, 0),
                               GoodEventConfig())
        assert np.array_equal(batch.R[:, 0], np.zeros(5))
        stage = -0.5 * (batch.s[:, :-1] ** 2 + batch.a**2)
        assert_allclose(batch.R[:, 1:], np.cumsum(stage, axis=1), rtol=1e-12)
        assert np.array_equal(batch.R_T, batch.R[:, -1])  # no terminal reward


class TestHandComputedCase:
    def test_constant_action_deterministic_lq(self):
        # sigma_eps = 0, T = 1, s0 = 1, constant action 0.5 via (w2=0, b2=0.5):
        # R_T = -(1^2 + 0.5^2)/2 = -0.625 and dR_T/db2 = -a = -0.5.
        env = EnvSpec.lq(horizon=1, sigma_eps=0.0, s0=1.0)
        config = PolicyConfig(width=1, seed=0)
        theta = np.zeros(7)
        theta[6] = 0.5
        params = init_params(config).with_theta(theta)
        batch = simulate_batch(env, params, 3, RandomStream(0, 0),
                               GoodEventConfig())
        assert_allclose(batch.R_T, -0.625, rtol=0, atol=0)
        assert_allclose(batch.grad_R[:, 6], -0.5, rtol=0, atol=0)
        # action gradient cannot leak into unused input weights at w2 = 0
        assert_allclose(batch.grad_R[:, 0:4], 0.0, atol=0.0)


class TestPathwiseGradient:
    @pytest.mark.parametrize("make_env,config", [
        (lambda: EnvSpec.lq(horizon=3), PolicyConfig(width=3, seed=21)),
        (lambda: EnvSpec.cosine(horizon=1), PolicyConfig(width=3, seed=22)),
        (lambda: EnvSpec.wealth(horizon=2),
         PolicyConfig(width=2, seed=23, output_squash=(0.0, 150.0))),
        (lambda: EnvSpec.torus(horizon=2), PolicyConfig(width=3, seed=24)),
    ])
    def test_mean_grad_matches_common_noise_finite_differences(self, make_env,
                                                               config):
        env = make_env()
        rng = np.random.default_rng(30)
        params = randomized(config, rng)
        stream = RandomStream(17, 0)
        good = GoodEventConfig()
        batch = simulate_batch(env, params, 64, stream, good)
        mean_grad = batch.grad_R.mean(axis=0)
        h = 1e-5
        for j in range(params.n_params):
            theta_p = params.theta.copy()
            theta_p[j] += h
            theta_m = params.theta.copy()
            theta_m[j] -= h
            up = simulate_batch(env, params.with_theta(theta_p), 64, stream,
                                good, with_grad=False).R_T.mean()
            dn = simulate_batch(env, params.with_theta(theta_m), 64, stream,
                                good, with_grad=False).R_T.mean()
            num = (up - dn) / (2 * h)
            assert abs(mean_grad[j] - num) <= max(1e-5, 1e-3 * abs(num))

    def test_hard_clamp_stops_gradient_when_saturated(self):
        env = EnvSpec.lq(horizon=1, sigma_eps=0.0, s0=1.0, a_min=-0.3, a_max=0.3)
        config = PolicyConfig(width=1, seed=0)
        saturated = init_params(config).with_theta(
            np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5])
        )
        batch = simulate_batch(env, saturated, 2, RandomStream(0, 0),
                               GoodEventConfig())
        assert_allclose(batch.a, 0.3, rtol=0)
        assert_allclose(batch.grad_R, 0.0, atol=0.0)
        interior = saturated.with_theta(
            np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1])
        )
        batch = simulate_batch(env, interior, 2, RandomStream(0, 0),
                               GoodEventConfig())
        assert_allclose(batch.grad_R[:, 6], -0.1, rtol=0, atol=0)


class TestGoodEvent:
    def test_clip_bounds_and_counts(self):
        env = EnvSpec.lq(horizon=6)
        params = init_params(PolicyConfig(width=3))
        good = GoodEventConfig(z_bound=1.0, eps_bound=1.0, mode="clip")
        stream = RandomStream(5, 0)
        batch = simulate_batch(env, params, 64, stream, good)
        assert np.max(np.abs(batch.z)) <= 1.0
        assert np.max(np.abs(batch.eps)) <= 1.0
        assert batch.n_truncated_z > 0 and batch.n_truncated_eps > 0
        raw = simulate_batch(env, params, 64, stream,
                             GoodEventConfig(mode="off"))
        assert np.array_equal(batch.z, np.clip(raw.z, -1.0, 1.0))
        assert batch.n_truncated_z == int((np.abs(raw.z) > 1.0).sum())

    def test_resample_keeps_distribution_inside(self):
        env = EnvSpec.lq(horizon=6)
        params = init_params(PolicyConfig(width=3))
        good = GoodEventConfig(z_bound=1.0, eps_bound=1.0, mode="resample")
        one = simulate_batch(env, params, 64, RandomStream(5, 0), good)
        two = simulate_batch(env, params, 64, RandomStream(5, 0), good)
        assert np.max(np.abs(one.z)) <= 1.0
        assert np.max(np.abs(one.eps)) <= 1.0
        assert one.n_truncated_z > 0
        assert np.array_equal(one.z, two.z)  # rejection is stream-deterministic
        # resampled values fill the interval rather than piling at the bound
        assert (np.abs(one.z) > 0.999).mean() < 0.05

    def test_state_deviation_diagnostic_bounded(self):
        env = EnvSpec.lq(horizon=5)
        params = init_params(PolicyConfig(width=3))  # zero policy
        good = GoodEventConfig(z_bound=6.0, eps_bound=6.0)
        batch = simulate_batch(env, params, 128, RandomStream(2, 0), good)
        # zero actions: |s_t| <= t * sigma_eps * eps_bound on the good event
        assert batch.state_dev_max <= env.horizon * env.sigma_eps * 6.0

    def test_mode_validation(self):
        with pytest.raises(ParameterError):
            GoodEventConfig(mode="winsorize")
        with pytest.raises(ParameterError):
            GoodEventConfig(z_bound=0.5)
        GoodEventConfig(z_bound=0.5, mode="off")  # bounds ignored when off


class TestWorkerInvariance:
    def test_results_identical_across_worker_counts(self):
        env = EnvSpec.wealth(horizon=3)
        params = randomized(
            PolicyConfig(architecture="residual-mlp", width=5, blocks=1,
                         output_squash=(0.0, 120.0)),
            np.random.default_rng(4),
        )
        base = simulate_batch(env, params, 37, RandomStream(9, 0),
                              GoodEventConfig(), workers=1)
        for workers in (2, 3, 5):
            split = simulate_batch(env, params, 37, RandomStream(9, 0),
                                   GoodEventConfig(), workers=workers)
            assert np.array_equal(base.s, split.s)
            assert np.array_equal(base.a, split.a)
            assert np.array_equal(base.R_T, split.R_T)
            assert np.array_equal(base.grad_R, split.grad_R)
            assert base.n_truncated_z == split.n_truncated_z
            assert base.state_dev_max == split.state_dev_max


class TestFailurePaths:
    def test_divergence_reported_with_trajectory_and_stage(self):
        env = EnvSpec.lq(horizon=3, sigma_eps=0.0, s0=1.0)
        config = PolicyConfig(width=1, activation="relu", seed=0)
        # action = 1e200 * relu(s): the squared stage reward overflows fast
        theta = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1e200, 0.0])
        params = init_params(config).with_theta(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as err:
                simulate_batch(env, params, 2, RandomStream(0, 0),
                               GoodEventConfig())
        assert err.value.stage >= 1
        assert err.value.what in ("state", "reward")

    def test_memory_budget(self):
        env = EnvSpec.lq(horizon=2)
        params = init_params(PolicyConfig(width=32))
        with pytest.raises(MemoryBudgetError) as err:
            simulate_batch(env, params, 1024, RandomStream(0, 0),
                           GoodEventConfig(), memory_budget=1 << 20)
        assert err.value.required == 4 * 1024 * params.n_params * 8
        assert err.value.budget == 1 << 20
        # gradient-free simulation carries no sensitivity matrices
        simulate_batch(env, params, 1024, RandomStream(0, 0),
                       GoodEventConfig(), with_grad=False,
                       memory_budget=1 << 20)

    def test_parameter_validation(self):
        env = EnvSpec.lq(horizon=2)
        params = init_params(PolicyConfig(width=2))
        with pytest.raises(ParameterError):
            simulate_batch(env, params, 0, RandomStream(0, 0), GoodEventConfig())
        with pytest.raises(ParameterError):
            simulate_batch(env, params, 4, RandomStream(0, 0), GoodEventConfig(),
                           workers=0)


class TestPolicyFnRollouts:
    def test_zero_rule_matches_zero_initialized_network(self):
        env = EnvSpec.lq(horizon=4)
        params = init_params(PolicyConfig(width=8))
        net = simulate_batch(env, params, 50, RandomStream(3, 0),
                             GoodEventConfig(), with_grad=False)
        rule = simulate_policy_fn(env, lambda t, s, R, z: np.zeros_like(s),
                                  50, RandomStream(3, 0))
        assert np.array_equal(net.R_T, rule)

    def test_all_cash_wealth_compounds_risklessly(self):
        env = EnvSpec.wealth(horizon=20)
        R_T = simulate_policy_fn(env, lambda t, s, R, z: np.zeros_like(s),
                                 200, RandomStream(12, 0))
        assert_allclose(R_T, 100.0 * math.exp(0.02), rtol=1e-12)

    def test_proportional_rule_replays_by_hand(self):
        env = EnvSpec.lq(horizon=3)
        stream = RandomStream(21, 0)
        R_T = simulate_policy_fn(env, lambda t, s, R, z: -0.5 * s, 16, stream)
        batch = simulate_batch(env, init_params(PolicyConfig(width=2)), 16,
                               stream, GoodEventConfig(), with_grad=False)
        for j in range(16):
            s, R = 0.0, 0.0
            for t in range(3):
                a = -0.5 * s
                R += float(reward(env, t, s, a).value)
                s = float(step(env, t, s, a, batch.eps[j, t]).next_state)
            assert_allclose(R_T[j], R, rtol=1e-12, atol=1e-14)


class TestTrajectoryDump:
    def test_csv_round_trip(self, tmp_path):
        env = EnvSpec.wealth(horizon=3)
        params = randomized(
            PolicyConfig(width=3, output_squash=(0.0, 50.0)),
            np.random.default_rng(2),
        )
        batch = simulate_batch(env, params, 4, RandomStream(6, 0),
                               GoodEventConfig(), with_grad=False)
        path = tmp_path / "trajectories.csv"
        dump_trajectories(batch, str(path))
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["traj", "t", "s", "a", "R"]
        assert len(rows) == 1 + 4 * (3 + 1)
        for row in rows[1:]:
            j, t = int(row[0]), int(row[1])
            assert float(row[2]) == batch.s[j, t]
            assert float(row[4]) == batch.R[j, t]
            if t < 3:
                assert float(row[3]) == batch.a[j, t]
            else:
                assert row[3] == ""


class TestTimeEncoding:
    def test_encodings_disagree_on_nonconstant_policy(self):
        env = EnvSpec.lq(horizon=4)
        rng = np.random.default_rng(14)
        theta = 0.5 * rng.standard_normal(n_params_for(PolicyConfig(width=4)))
        a = init_params(PolicyConfig(width=4)).with_theta(theta)
        b = init_params(
            PolicyConfig(width=4, time_encoding="t-over-T")
        ).with_theta(theta)
        run_a = simulate_batch(env, a, 8, RandomStream(0, 0), GoodEventConfig(),
                               with_grad=False)
        run_b = simulate_batch(env, b, 8, RandomStream(0, 0), GoodEventConfig(),
                               with_grad=False)
        assert not np.allclose(run_a.a, run_b.a)


def n_params_for(config):
    return init_params(config).n_params
