"""Outer training loop: step schedules, stall/restart policy, diagnostics.

One iteration simulates a fresh batch (stream id = iteration index), forms
the coupled loss/gradient estimate, and applies the parameter update.  A run
converges when the batch loss drops below the threshold; it stalls when no
new loss minimum appears for ``stall_window`` consecutive iterations, in
which case the parameters are re-initialized from a seed derived from
``(seed, restart_index)`` until the restart budget runs out.  A stalled run
returns a report flagged unconverged rather than raising.

The plain update theta <- theta - alpha_k g_k is what the stationarity
diagnostic ``weighted_grad_average`` (sum of (alpha_k/A_K) |g_k|^2) speaks
about; the adaptive-moment schedule is offered for practice runs only.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .charfn import CFTable, FrequencyGrid, TargetSpec, target_cf
from .environment import EnvSpec
from .errors import DivergenceError, DomainError, ParameterError
from .loss import GradientEstimate, cf_loss_gradient, cf_loss_gradient_streaming
from .numerics import RandomStream, derive_seed
from .policy import PolicyConfig, PolicyParams, init_params, n_params
from .rollout import DEFAULT_MEMORY_BUDGET, GoodEventConfig, simulate_batch

SCHEDULE_KINDS = ("constant", "robbins-monro", "adaptive-moment")


@dataclass(frozen=True)
class StepSchedule:
    """Step-size rule: constant alpha, Robbins-Monro alpha_k = a/(k + k0)
    (square-summable but not summable by construction), or adaptive-moment."""

    kind: str = "constant"
    alpha: float = 0.1
    a: float = 1.0
    k0: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps_am: float = 1e-8

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.kind == "robbins-monro" and not (self.a > 0 and self.k0 >= 1):
            raise ParameterError("robbins-monro needs a > 0 and k0 >= 1")
        if self.kind == "adaptive-moment" and not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")

    def step_size(self, k: int) -> float:
        if self.kind == "robbins-monro":
            return self.a / (k + self.k0)
        return self.alpha


@dataclass(frozen=True)
class TrainConfig:
    M: int = 1024
    max_iters: int = 1000
    threshold: float = 1e-3
    stall_window: int = 1000
    restart_limit: int = 0
    seed: int = 0
    schedule: StepSchedule = field(default_factory=StepSchedule)
    good: GoodEventConfig = field(default_factory=GoodEventConfig)
    workers: int = 1
    memory_budget: Optional[int] = None
    streaming_chunk: int = 8192
    theta_box: float = 1e3   # warn when any |theta_i| exceeds this

    def __post_init__(self):
        if self.M < 1 or self.max_iters < 1:
            raise ParameterError("M and max_iters must be >= 1")
        if self.threshold < 0:
            raise ParameterError(f"threshold must be >= 0, got {self.threshold}")
        if self.stall_window < 1:
            raise ParameterError(f"stall_window must be >= 1, got {self.stall_window}")
        if self.restart_limit < 0:
            raise ParameterError(f"restart_limit must be >= 0, got {self.restart_limit}")


@dataclass(frozen=True)
class TrainRecord:
    k: int
    loss: float
    grad_norm: float
    alpha: float


@dataclass
class TrainReport:
    records: List[TrainRecord]
    final_params: PolicyParams
    restarts_used: int
    converged: bool
    wall_time: float

    def alpha_sum(self, K: int) -> float:
        return float(sum(rec.alpha for rec in self.records[:K]))


def _policy_seed(config: TrainConfig, restart: int) -> int:
    return derive_seed(config.seed, restart)


def train(env: EnvSpec, policy_config: PolicyConfig, target_spec: TargetSpec,
          grid: FrequencyGrid, config: TrainConfig,
          callback: Optional[Callable[[int, GradientEstimate, PolicyParams], None]] = None,
          ) -> TrainReport:
    """Run the training loop to convergence, stall, or the iteration cap.

    ``callback(k, estimate, params)`` fires after each estimate, before the
    update — useful for metrics streaming and checkpointing.  Reproducible:
    iteration k draws from stream id k of ``config.seed``, and restart r
    re-initializes from ``derive_seed(config.seed, r)``.
    """
    start = time.perf_counter()
    target = target_cf(target_spec, grid)
    n = n_params(policy_config)
    budget = config.memory_budget if config.memory_budget is not None else DEFAULT_MEMORY_BUDGET
    streaming = 4 * config.M * n * 8 > budget

    params = init_params(replace(policy_config, seed=_policy_seed(config, 0)))
    sched = config.schedule
    moment_m = np.zeros(n)
    moment_v = np.zeros(n)
    steps_since_restart = 0
    restarts = 0
    best = np.inf
    since_best = 0
    converged = False
    warned_box = False
    records: List[TrainRecord] = []

    for k in range(config.max_iters):
        stream = RandomStream(config.seed, stream_id=k)
        try:
            if streaming:
                est = cf_loss_gradient_streaming(
                    env, params, config.M, stream, target, grid, config.good,
                    chunk=config.streaming_chunk)
            else:
                batch = simulate_batch(env, params, config.M, stream, config.good,
                                       with_grad=True, workers=config.workers,
                                       memory_budget=budget)
                est = cf_loss_gradient(batch, target, grid)
        except DivergenceError as exc:
            raise DivergenceError(exc.trajectory, exc.stage,
                                  f"{exc.what} (training iteration {k})") from exc
        alpha_k = sched.step_size(steps_since_restart)
        records.append(TrainRecord(k=k, loss=est.loss, grad_norm=est.grad_norm,
                                   alpha=alpha_k))
        if callback is not None:
            callback(k, est, params)
        if est.loss < config.threshold:
            converged = True
            break
        if est.loss < best:
            best = est.loss
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.stall_window:
            if restarts >= config.restart_limit:
                break  # stalled, budget exhausted: report flags unconverged
            restarts += 1
            params = init_params(replace(policy_config,
                                         seed=_policy_seed(config, restarts)))
            moment_m[:] = 0.0
            moment_v[:] = 0.0
            steps_since_restart = 0
            best = np.inf
            since_best = 0
            continue
        if sched.kind == "adaptive-moment":
            moment_m = sched.beta1 * moment_m + (1 - sched.beta1) * est.grad
            moment_v = sched.beta2 * moment_v + (1 - sched.beta2) * est.grad**2
            t = steps_since_restart + 1
            m_hat = moment_m / (1 - sched.beta1**t)
            v_hat = moment_v / (1 - sched.beta2**t)
            theta = params.theta - alpha_k * m_hat / (np.sqrt(v_hat) + sched.eps_am)
        else:
            theta = params.theta - alpha_k * est.grad
        params = params.with_theta(theta)
        steps_since_restart += 1
        if not warned_box and np.max(np.abs(theta)) > config.theta_box:
            warnings.warn(
                f"|theta|_inf = {np.max(np.abs(theta)):.3g} exceeded the "
                f"monitor box {config.theta_box:.3g}", RuntimeWarning)
            warned_box = True

    return TrainReport(records=records, final_params=params,
                       restarts_used=restarts, converged=converged,
                       wall_time=time.perf_counter() - start)


def weighted_grad_average(report: TrainReport, K: int) -> float:
    """Stationarity diagnostic sum_{k<K} (alpha_k / A_K) |g_k|^2."""
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    if K > len(report.records):
        raise DomainError(f"only {len(report.records)} iterations recorded")
    A_K = report.alpha_sum(K)
    return float(sum(rec.alpha * rec.grad_norm**2 for rec in report.records[:K]) / A_K)


@dataclass(frozen=True)
class BiasProbeResult:
    slope: float
    M_list: tuple
    errors: tuple      # ||mean g_M - g_ref|| per M
    ref_norm: float


def bias_decay_probe(env: EnvSpec, params: PolicyParams, target,
                     grid: FrequencyGrid, M_list: Sequence[int],
                     repetitions: int, seed: int,
                     M_ref: int = 10**6,
                     good: Optional[GoodEventConfig] = None,
                     chunk: int = 16384) -> BiasProbeResult:
    """Measure how fast the estimator bias decays in the batch size.

    ``target`` may be a TargetSpec or a CFTable already evaluated on ``grid``.
    Averages ``repetitions`` independent gradient estimates at each M, takes
    the distance to a near-exact reference from one M_ref batch, and returns
    the log-log regression slope (the bias bound predicts -1).  A
    configuration whose gradient is exactly zero leaves nothing to regress:
    all errors vanish and the slope comes back NaN.
    """
    M_list = tuple(int(M) for M in M_list)
    if len(M_list) < 3 or any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise ParameterError("M_list must be strictly increasing, length >= 3")
    if repetitions < 1:
        raise ParameterError(f"repetitions must be >= 1, got {repetitions}")
    good = good or GoodEventConfig()
    if isinstance(target, TargetSpec):
        target = target_cf(target, grid)
    ref = cf_loss_gradient_streaming(env, params, M_ref, RandomStream(seed, 0),
                                     target, grid, good, chunk=chunk)
    errors = []
    for i, M in enumerate(M_list):
        mean_g = np.zeros(params.n_params)
        for r in range(repetitions):
            stream = RandomStream(seed, 1 + r * len(M_list) + i)
            batch = simulate_batch(env, params, M, stream, good, with_grad=True)
            mean_g += cf_loss_gradient(batch, target, grid).grad
        mean_g /= repetitions
        errors.append(float(np.linalg.norm(mean_g - ref.grad)))
    errors = tuple(errors)
    if max(errors) < 1e-15:
        return BiasProbeResult(slope=float("nan"), M_list=M_list, errors=errors,
                               ref_norm=float(np.linalg.norm(ref.grad)))
    slope = float(np.polyfit(np.log(M_list), np.log(errors), 1)[0])
    return BiasProbeResult(slope=slope, M_list=M_list, errors=errors,
                           ref_norm=float(np.linalg.norm(ref.grad)))
