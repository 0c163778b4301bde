"""Distribution matching for finite-horizon controlled Markov chains.

Trains randomized Markov policies so that the law of the cumulative reward
matches a prescribed target, by stochastic descent on a weighted L2 distance
between characteristic functions, with exact pathwise gradients through the
simulation.  Analytic mode-space solvers certify the cosine and torus
examples independently of training.
"""

from .charfn import (
    CFTable,
    FrequencyGrid,
    TargetSpec,
    build_uniform_grid,
    cf_tail_mass,
    empirical_cf,
    target_cf,
)
from .environment import EnvSpec, RewardResult, StepResult, reward, sample_initial, step
from .errors import DistmatchError
from .loss import (
    GradientEstimate,
    bernoulli_loss,
    bias_bound,
    cf_loss,
    cf_loss_gradient,
    cf_loss_gradient_streaming,
    epps_pulley_loss,
)
from .numerics import RandomStream, bessel_j, least_squares, standard_normal, wasserstein1
from .oracle import (
    ActionDensity,
    JacobiAngerProblem,
    ModeSolution,
    estimate_modes,
    forward_cf,
    reconstruct_density,
    sample_action_density,
    solve_modes,
    torus_deconvolve,
)
from .policy import (
    PolicyConfig,
    PolicyEval,
    PolicyParams,
    evaluate,
    evaluate_batch,
    init_params,
    load_checkpoint,
    n_params,
    save_checkpoint,
)
from .rollout import (
    GoodEventConfig,
    TrajectoryBatch,
    simulate_batch,
    simulate_policy_fn,
)
from .trainer import (
    BiasProbeResult,
    StepSchedule,
    TrainConfig,
    TrainReport,
    bias_decay_probe,
    train,
    weighted_grad_average,
)

__version__ = "0.1.0"
