"""Environment dynamics, rewards, and their first derivatives.

All derivative fields are validated against central finite differences; the
closed-form transition values against direct hand substitution.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from distmatch import EnvSpec, RandomStream, reward, sample_initial, step
from distmatch.errors import CapabilityError, ParameterError, StageError

TWO_PI = 2.0 * math.pi

ENVS = {
    "lq": EnvSpec.lq(horizon=5),
    "wealth": EnvSpec.wealth(horizon=5),
    "cosine": EnvSpec.cosine(horizon=2),
    "torus": EnvSpec.torus(horizon=2),
}


class TestStep:
    def test_lq_noise_free_affine(self):
        res = step(ENVS["lq"], 0, 1.0, 2.0, 0.0)
        assert res.next_state == 3.0
        assert res.dF_ds == 1.0
        assert res.dF_da == 1.0

    def test_lq_noise_scaling(self):
        env = EnvSpec.lq(horizon=3, sigma_eps=0.1)
        res = step(env, 1, 0.0, 0.0, 2.0)
        assert_allclose(res.next_state, 0.2, rtol=1e-15)

    def test_wealth_zero_action_compounds_risklessly(self):
        env = EnvSpec.wealth()
        for eps in (-3.0, 0.0, 1.7):
            res = step(env, 0, 100.0, 0.0, eps)
            assert_allclose(res.next_state, 100.0 * math.exp(0.001), rtol=1e-15)
        assert_allclose(step(env, 0, 100.0, 0.0, 0.0).next_state, 100.1001,
                        atol=1e-4)

    def test_wealth_derivatives_closed_form(self):
        env = EnvSpec.wealth()
        eps = 0.63
        growth = math.exp(env.r * env.dt)
        y = (math.exp(-env.r * env.dt
                      + (env.mu - 0.5 * env.sigma**2) * env.dt
                      + env.sigma * math.sqrt(env.dt) * eps) - 1.0)
        res = step(env, 2, 80.0, 12.0, eps)
        assert_allclose(res.next_state, growth * (80.0 + 12.0 * y), rtol=1e-15)
        assert_allclose(res.dF_ds, growth, rtol=1e-15)
        assert_allclose(res.dF_da, growth * y, rtol=1e-15)

    def test_torus_wrap(self):
        res = step(ENVS["torus"], 0, 6.0, 1.0, 0.0)
        assert_allclose(res.next_state, 7.0 - TWO_PI, rtol=1e-12)
        assert res.dF_ds == 1.0

    def test_torus_outputs_in_period(self):
        rng = np.random.default_rng(0)
        env = ENVS["torus"]
        s = rng.uniform(-20, 20, 500)
        a = rng.uniform(-20, 20, 500)
        eps = rng.standard_normal(500)
        out = np.asarray(step(env, 0, s, a, eps).next_state)
        assert np.all((out >= 0.0) & (out < TWO_PI))

    def test_stage_out_of_range(self):
        with pytest.raises(StageError):
            step(ENVS["lq"], 5, 0.0, 0.0, 0.0)
        with pytest.raises(StageError):
            step(ENVS["lq"], -1, 0.0, 0.0, 0.0)

    def test_batch_broadcasting(self):
        env = ENVS["lq"]
        s = np.array([0.0, 1.0, 2.0])
        out = step(env, 0, s, 1.0, 0.0)
        assert_allclose(out.next_state, s + 1.0, rtol=0)


class TestReward:
    def test_lq_quadratic(self):
        res = reward(ENVS["lq"], 0, 1.0, 2.0)
        assert res.value == -2.5
        assert res.dr_ds == -1.0
        assert res.dr_da == -2.0

    def test_cosine_terminal(self):
        env = EnvSpec.cosine(horizon=1, V=1.0)
        res = reward(env, 1, 0.0, 0.0)
        assert res.value == 1.0
        assert res.dr_ds == 0.0
        assert reward(env, 0, 5.0, 5.0).value == 0.0

    def test_cosine_amplitude(self):
        env = EnvSpec.cosine(horizon=1, V=2.5)
        res = reward(env, 1, 0.3, 0.0)
        assert_allclose(res.value, 2.5 * math.cos(0.3), rtol=1e-15)
        assert_allclose(res.dr_ds, -2.5 * math.sin(0.3), rtol=1e-15)

    def test_wealth_terminal_identity(self):
        env = EnvSpec.wealth(horizon=3)
        res = reward(env, 3, 106.18, 0.0)
        assert res.value == 106.18
        assert res.dr_ds == 1.0
        assert res.dr_da == 0.0
        assert reward(env, 1, 106.18, 4.0).value == 0.0

    def test_torus_terminal_identity(self):
        env = EnvSpec.torus(horizon=2)
        assert reward(env, 2, 1.25, 0.0).value == 1.25
        assert reward(env, 0, 1.25, 0.0).value == 0.0

    def test_terminal_query_needs_capability(self):
        with pytest.raises(CapabilityError):
            reward(ENVS["lq"], 5, 0.0, 0.0)

    def test_stage_above_horizon(self):
        with pytest.raises(StageError):
            reward(ENVS["wealth"], 6, 0.0, 0.0)


class TestSampleInitial:
    def test_defaults(self):
        assert sample_initial(EnvSpec.lq()) == 0.0
        assert sample_initial(EnvSpec.wealth()) == 100.0
        assert sample_initial(EnvSpec.torus(s0=1.0), RandomStream(0, 0)) == 1.0


class TestDerivativesAgainstFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(ENVS))
    def test_step_and_reward_partials(self, name):
        env = ENVS[name]
        rng = np.random.default_rng(17)
        h = 1e-5
        worst = 0.0
        for _ in range(1000):
            if name == "wealth":
                s = rng.uniform(10.0, 200.0)
                a = rng.uniform(-50.0, 50.0)
            else:
                s = rng.uniform(-3.0, 3.0)
                a = rng.uniform(-3.0, 3.0)
            eps = rng.standard_normal()
            if name == "torus":
                # keep clear of the wrap discontinuity of the mod map
                pos = (s + a + env.sigma_eps * eps) % TWO_PI
                if min(pos, TWO_PI - pos) < 10 * h:
                    continue
            res = step(env, 0, s, a, eps)
            fds = (float(step(env, 0, s + h, a, eps).next_state)
                   - float(step(env, 0, s - h, a, eps).next_state)) / (2 * h)
            fda = (float(step(env, 0, s, a + h, eps).next_state)
                   - float(step(env, 0, s, a - h, eps).next_state)) / (2 * h)
            worst = max(worst, abs(float(res.dF_ds) - fds),
                        abs(float(res.dF_da) - fda))
            rew = reward(env, 0, s, a)
            rds = (float(reward(env, 0, s + h, a).value)
                   - float(reward(env, 0, s - h, a).value)) / (2 * h)
            rda = (float(reward(env, 0, s, a + h).value)
                   - float(reward(env, 0, s, a - h).value)) / (2 * h)
            worst = max(worst, abs(float(rew.dr_ds) - rds),
                        abs(float(rew.dr_da) - rda))
            if env.has_terminal_reward:
                term = reward(env, env.horizon, s, 0.0)
                tds = (float(reward(env, env.horizon, s + h, 0.0).value)
                       - float(reward(env, env.horizon, s - h, 0.0).value)) / (2 * h)
                worst = max(worst, abs(float(term.dr_ds) - tds))
        assert worst <= 1e-6


class TestClosedFormTrajectories:
    def test_wealth_martingale_identity(self):
        env = EnvSpec.wealth()
        s = 57.25
        res = step(env, 0, s, 0.0, 1.234)
        assert res.next_state == math.exp(env.r * env.dt) * s

    def test_lq_deterministic_recursion(self):
        env = EnvSpec.lq(horizon=4, sigma_eps=0.0)
        actions = [0.5, -1.0, 2.0, 0.25]
        s = 1.0
        for t, a in enumerate(actions):
            s_next = step(env, t, s, a, 0.77).next_state  # eps inert at sigma 0
            assert s_next == s + a
            s = float(s_next)
        assert s == 1.0 + sum(actions)


class TestFractionControl:
    def test_matches_dollar_action_times_state(self):
        frac = EnvSpec.wealth(fraction_control=True)
        dollars = EnvSpec.wealth()
        s, pi, eps = 120.0, 0.7, 0.3
        res_f = step(frac, 0, s, pi, eps)
        res_d = step(dollars, 0, s, pi * s, eps)
        assert res_f.next_state == res_d.next_state

    def test_fully_invested_is_geometric(self):
        env = EnvSpec.wealth(fraction_control=True)
        s, eps = 80.0, -0.5
        res = step(env, 0, s, 1.0, eps)
        gross = math.exp((env.mu - 0.5 * env.sigma**2) * env.dt
                         + env.sigma * math.sqrt(env.dt) * eps)
        assert_allclose(float(res.next_state), s * gross, rtol=1e-14)
        # multiplicative dynamics: state derivative equals growth factor
        assert_allclose(float(res.dF_ds), float(res.next_state) / s, rtol=1e-14)

    def test_derivatives_match_finite_differences(self):
        env = EnvSpec.wealth(fraction_control=True)
        rng = np.random.default_rng(21)
        h = 1e-6
        for _ in range(200):
            s = float(rng.uniform(20.0, 300.0))
            a = float(rng.uniform(0.0, 2.0))
            eps = float(rng.standard_normal())
            res = step(env, 0, s, a, eps)
            fds = (float(step(env, 0, s + h, a, eps).next_state)
                   - float(step(env, 0, s - h, a, eps).next_state)) / (2 * h)
            fda = (float(step(env, 0, s, a + h, eps).next_state)
                   - float(step(env, 0, s, a - h, eps).next_state)) / (2 * h)
            assert abs(float(res.dF_ds) - fds) <= 1e-5 * max(1.0, abs(fds))
            assert abs(float(res.dF_da) - fda) <= 1e-5 * max(1.0, abs(fda))

    def test_wealth_only_option(self):
        for make in (EnvSpec.lq, EnvSpec.cosine, EnvSpec.torus):
            with pytest.raises(ParameterError):
                make(fraction_control=True)


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            EnvSpec(kind="pendulum", horizon=1, s0=0.0)

    def test_bad_horizon(self):
        with pytest.raises(ParameterError):
            EnvSpec.lq(horizon=0)

    def test_negative_noise_scale(self):
        with pytest.raises(ParameterError):
            EnvSpec.lq(sigma_eps=-0.1)

    def test_wealth_needs_positive_vol_and_dt(self):
        with pytest.raises(ParameterError):
            EnvSpec.wealth(sigma=0.0)
        with pytest.raises(ParameterError):
            EnvSpec.wealth(dt=0.0)

    def test_action_clamp(self):
        env = EnvSpec.lq(a_min=-1.0, a_max=1.0)
        clipped, deriv = env.clamp_action(np.array([-2.0, 0.3, 2.0]))
        assert_allclose(clipped, [-1.0, 0.3, 1.0], rtol=0)
        assert_allclose(deriv, [0.0, 1.0, 0.0], rtol=0)
        with pytest.raises(ParameterError):
            EnvSpec.lq(a_min=1.0, a_max=-1.0)
        with pytest.raises(ParameterError):
            EnvSpec.lq(a_min=1.0)
