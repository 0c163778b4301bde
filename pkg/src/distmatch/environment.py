"""Controlled dynamics F(s, a, eps) and rewards r(s, a) with first derivatives.

Four one-dimensional environments:

``lq``      s' = s + a + sigma_eps*eps, stage reward -(s^2 + a^2)/2.
``wealth``  s' = e^{r dt}(s + a*y(eps)) with y the discounted risky excess
            return of a lognormal step; terminal reward s_T.  With
            ``fraction_control`` the action is the invested fraction of
            wealth instead of a dollar amount: dollars = a*s.
``cosine``  s' = s + a + sigma_eps*eps; terminal reward V*cos(s_T).
``torus``   s' = (s + a + sigma_eps*eps) mod 2*pi; terminal reward s_T.

``step``/``reward`` accept scalars or same-shape arrays and broadcast, so a
whole batch of trajectories advances in one call.  Environments with a
terminal reward report it through ``reward(env, T, s, a=0)``; the action
argument is a sentinel there and does not enter the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import CapabilityError, ParameterError, StageError
from .numerics import RandomStream

ENV_KINDS = ("lq", "wealth", "cosine", "torus")

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class EnvSpec:
    """Immutable description of one environment instance."""

    kind: str
    horizon: int
    s0: float
    sigma_eps: float = 0.1
    # wealth parameters (riskless rate, drift, volatility, step length)
    r: float = 0.02
    mu: float = 0.06
    sigma: float = 0.40
    dt: float = 0.05
    # wealth only: interpret the action as the invested fraction of wealth
    # (dollars = a*s) rather than a dollar amount
    fraction_control: bool = False
    # cosine reward amplitude
    V: float = 1.0
    has_terminal_reward: bool = False
    # optional hard action clamp (safety net; smooth squashing belongs to the policy)
    a_min: Optional[float] = None
    a_max: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ParameterError(f"unknown environment kind {self.kind!r}")
        if self.horizon < 1 or int(self.horizon) != self.horizon:
            raise ParameterError(f"horizon must be an integer >= 1, got {self.horizon}")
        # sigma_eps = 0 is legal: deterministic dynamics for closed-form checks
        if self.kind in ("lq", "cosine", "torus") and not self.sigma_eps >= 0:
            raise ParameterError(f"sigma_eps must be nonnegative, got {self.sigma_eps}")
        if self.kind == "wealth" and not (self.sigma > 0 and self.dt > 0):
            raise ParameterError("wealth needs sigma > 0 and dt > 0")
        if self.fraction_control and self.kind != "wealth":
            raise ParameterError("fraction_control is a wealth-only option")
        if (self.a_min is None) != (self.a_max is None):
            raise ParameterError("a_min and a_max must be set together")
        if self.a_min is not None and not self.a_min < self.a_max:
            raise ParameterError("need a_min < a_max")

    @staticmethod
    def lq(horizon: int = 10, sigma_eps: float = 0.1, s0: float = 0.0, **kw) -> "EnvSpec":
        return EnvSpec(kind="lq", horizon=horizon, s0=s0, sigma_eps=sigma_eps, **kw)

    @staticmethod
    def wealth(horizon: int = 20, s0: float = 100.0, r: float = 0.02, mu: float = 0.06,
               sigma: float = 0.40, dt: float = 0.05, **kw) -> "EnvSpec":
        return EnvSpec(kind="wealth", horizon=horizon, s0=s0, r=r, mu=mu, sigma=sigma,
                       dt=dt, has_terminal_reward=True, **kw)

    @staticmethod
    def cosine(horizon: int = 1, s0: float = 0.0, sigma_eps: float = 0.1,
               V: float = 1.0, **kw) -> "EnvSpec":
        return EnvSpec(kind="cosine", horizon=horizon, s0=s0, sigma_eps=sigma_eps,
                       V=V, has_terminal_reward=True, **kw)

    @staticmethod
    def torus(horizon: int = 1, s0: float = 0.0, sigma_eps: float = 1.0, **kw) -> "EnvSpec":
        return EnvSpec(kind="torus", horizon=horizon, s0=s0, sigma_eps=sigma_eps,
                       has_terminal_reward=True, **kw)

    def clamp_action(self, a):
        """Hard-clip the action into [a_min, a_max] when a clamp is configured.

        Returns (clamped action, pointwise derivative of the clamp map).
        """
        if self.a_min is None:
            return a, np.ones_like(np.asarray(a, dtype=float))
        clipped = np.clip(a, self.a_min, self.a_max)
        inside = (np.asarray(a) > self.a_min) & (np.asarray(a) < self.a_max)
        return clipped, inside.astype(float)


@dataclass(frozen=True)
class StepResult:
    next_state: object  # real or array
    dF_ds: object
    dF_da: object


@dataclass(frozen=True)
class RewardResult:
    value: object
    dr_ds: object
    dr_da: object


def _wealth_excess(env: EnvSpec, eps):
    """Discounted excess return y(eps) = e^{-r dt} exp((mu - sigma^2/2) dt + sigma sqrt(dt) eps) - 1."""
    drift = (env.mu - 0.5 * env.sigma**2) * env.dt
    return np.exp(-env.r * env.dt + drift + env.sigma * math.sqrt(env.dt) * eps) - 1.0


def step(env: EnvSpec, t: int, s, a, eps) -> StepResult:
    """One transition s_{t+1} = F(s_t, a_t, eps_{t+1}) with derivatives.

    ``eps`` is a standard-normal draw; environment-specific scaling happens
    inside.  The torus wrap derivative is taken as 1, its a.e. value.
    """
    if not 0 <= t < env.horizon:
        raise StageError(f"stage {t} outside [0, {env.horizon})")
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    eps = np.asarray(eps, dtype=float)
    one = np.ones(np.broadcast(s, a, eps).shape)
    if env.kind in ("lq", "cosine"):
        return StepResult(s + a + env.sigma_eps * eps, one, one)
    if env.kind == "torus":
        return StepResult(np.mod(s + a + env.sigma_eps * eps, TWO_PI), one, one)
    if env.kind == "wealth":
        y = _wealth_excess(env, eps)
        growth = math.exp(env.r * env.dt)
        if env.fraction_control:
            return StepResult(growth * (s + (a * s) * y),
                              growth * (1.0 + a * y) * one, growth * s * y)
        return StepResult(growth * (s + a * y), growth * one, growth * y)
    raise ParameterError(f"unknown environment kind {env.kind!r}")  # pragma: no cover


def reward(env: EnvSpec, t: int, s, a) -> RewardResult:
    """Stage reward r(s_t, a_t) for t < T, terminal reward at t = T.

    The terminal query is only legal on environments with the terminal-reward
    capability; pass a = 0 there (sentinel, unused).
    """
    if not 0 <= t <= env.horizon:
        raise StageError(f"stage {t} outside [0, {env.horizon}]")
    terminal = t == env.horizon
    if terminal and not env.has_terminal_reward:
        raise CapabilityError(f"{env.kind} environment has no terminal reward")
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    zero = np.zeros(np.broadcast(s, a).shape)
    if env.kind == "lq":
        return RewardResult(-0.5 * (s**2 + a**2), -s, -a)
    if env.kind == "wealth":
        if terminal:
            return RewardResult(s + zero, 1.0 + zero, zero)
        return RewardResult(zero, zero, zero)
    if env.kind == "cosine":
        if terminal:
            return RewardResult(env.V * np.cos(s) + zero, -env.V * np.sin(s) + zero, zero)
        return RewardResult(zero, zero, zero)
    if env.kind == "torus":
        if terminal:
            return RewardResult(s + zero, 1.0 + zero, zero)
        return RewardResult(zero, zero, zero)
    raise ParameterError(f"unknown environment kind {env.kind!r}")  # pragma: no cover


def sample_initial(env: EnvSpec, stream: Optional[RandomStream] = None) -> float:
    """Initial state; the stream argument is accepted for interface symmetry
    (all shipped environments start deterministically)."""
    return float(env.s0)
