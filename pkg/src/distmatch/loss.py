"""Characteristic-function loss, its pathwise stochastic gradient, and the
closed-form reference losses.

The training objective on a grid (u_l, beta_l) is

    L(theta) = sum_l beta_l |phi*(u_l) - phihat(u_l)|^2,

with phihat the empirical CF of the terminal cumulative rewards.  Its exact
derivative through the empirical CF is

    grad = 2 sum_l beta_l Re[ conj(phihat_l - phi*_l)
                              * (1/M) sum_j i u_l e^{i u_l R_j} gradR_j ],

which contracts to grad = (1/M) sum_j c_j * gradR_j with the per-trajectory
scalar c_j = 2 sum_l beta_l u_l (B_l cos(u_l R_j) - A_l sin(u_l R_j)),
A + iB = phihat - phi*.  All reductions run through numpy's pairwise sums in
a fixed chunk order, so results do not depend on BLAS threading.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .charfn import CFTable, FrequencyGrid, empirical_cf, target_cf
from .environment import EnvSpec
from .errors import (
    CapabilityError,
    DomainError,
    EmptySampleError,
    GridError,
    ParameterError,
)
from .numerics import RandomStream
from .policy import PolicyParams
from .rollout import GoodEventConfig, TrajectoryBatch, simulate_range

_ROW_CHUNK = 1 << 22  # cap on samples*nodes entries per vectorized block


@dataclass(frozen=True)
class GradientEstimate:
    """Loss value, gradient, per-node residual phi* - phihat, and |grad|."""

    loss: float
    grad: np.ndarray
    per_node_residual: np.ndarray
    grad_norm: float


def _check_grid(target: CFTable, grid: FrequencyGrid) -> None:
    if target.grid is not grid and not target.grid.same_nodes(grid):
        raise GridError("target table and loss grid have different nodes")


def _loss_from_residual(grid: FrequencyGrid, residual: np.ndarray) -> float:
    return float(np.sum(grid.weights * np.abs(residual) ** 2))


def cf_loss(batch: TrajectoryBatch, target: CFTable, grid: FrequencyGrid) -> float:
    """Discretized weighted-L2 CF distance of the batch's terminal rewards."""
    _check_grid(target, grid)
    phihat = empirical_cf(batch.R_T, grid)
    return _loss_from_residual(grid, target.values - phihat.values)


def _contraction_weights(R: np.ndarray, grid: FrequencyGrid,
                         residual: np.ndarray) -> np.ndarray:
    """c_j = 2 sum_l beta_l u_l (B_l cos(u_l R_j) - A_l sin(u_l R_j))."""
    u, beta = grid.nodes, grid.weights
    diff = -residual  # phihat - phi*
    wB = 2.0 * beta * u * diff.imag
    wA = 2.0 * beta * u * diff.real
    c = np.empty(R.size)
    step = max(1, int(_ROW_CHUNK // max(u.size, 1)))
    for lo in range(0, R.size, step):
        arg = np.outer(R[lo:lo + step], u)
        c[lo:lo + step] = np.cos(arg) @ wB - np.sin(arg) @ wA
    return c


def _weighted_grad_sum(c: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """(1/M) sum_j c_j grad_R[j] with a fixed, BLAS-free summation order."""
    M, n = grad_R.shape
    out = np.zeros(n)
    step = max(1, int(_ROW_CHUNK // max(n, 1)))
    for lo in range(0, M, step):
        out += (c[lo:lo + step, None] * grad_R[lo:lo + step]).sum(axis=0)
    return out / M


def cf_loss_gradient(batch: TrajectoryBatch, target: CFTable,
                     grid: FrequencyGrid) -> GradientEstimate:
    """Exact derivative of cf_loss through the empirical CF of the batch.

    The same trajectories feed the CF estimate and its derivative (a coupled
    single-batch estimator), which carries an O(1/M) bias in exchange for one
    simulation per step.
    """
    if batch.grad_R is None:
        raise CapabilityError("batch was simulated without gradients")
    _check_grid(target, grid)
    phihat = empirical_cf(batch.R_T, grid)
    residual = target.values - phihat.values
    c = _contraction_weights(batch.R_T, grid, residual)
    grad = _weighted_grad_sum(c, batch.grad_R)
    return GradientEstimate(
        loss=_loss_from_residual(grid, residual),
        grad=grad,
        per_node_residual=residual,
        grad_norm=float(np.linalg.norm(grad)),
    )


def cf_loss_gradient_streaming(env: EnvSpec, params: PolicyParams, M: int,
                               base_stream: RandomStream, target: CFTable,
                               grid: FrequencyGrid, good: GoodEventConfig,
                               chunk: int = 4096) -> GradientEstimate:
    """Same estimate as ``cf_loss_gradient`` over a freshly simulated batch,
    without ever holding M x n_params sensitivities.

    Two passes over trajectory chunks: the first collects terminal rewards and
    the empirical CF, the second re-simulates each chunk (identical per-
    trajectory substreams) with gradients and accumulates c_j gradR_j on the
    fly.  Useful when the dense batch would blow the memory budget, e.g. the
    M = 10^6 reference batches of the bias probe.
    """
    if M < 1:
        raise ParameterError(f"M must be >= 1, got {M}")
    _check_grid(target, grid)
    R_T = np.empty(M)
    for lo in range(0, M, chunk):
        hi = min(M, lo + chunk)
        part = simulate_range(env, params, lo, hi, base_stream, good, False)
        R_T[lo:hi] = part.R_T
    phihat = empirical_cf(R_T, grid)
    residual = target.values - phihat.values
    c = _contraction_weights(R_T, grid, residual)
    grad = np.zeros(params.n_params)
    for lo in range(0, M, chunk):
        hi = min(M, lo + chunk)
        part = simulate_range(env, params, lo, hi, base_stream, good, True)
        out = np.zeros(params.n_params)
        step = max(1, int(_ROW_CHUNK // max(params.n_params, 1)))
        for a in range(0, hi - lo, step):
            out += (c[lo + a:lo + min(hi - lo, a + step), None]
                    * part.grad_R[a:a + step]).sum(axis=0)
        grad += out
    grad /= M
    return GradientEstimate(
        loss=_loss_from_residual(grid, residual),
        grad=grad,
        per_node_residual=residual,
        grad_norm=float(np.linalg.norm(grad)),
    )


def epps_pulley_loss(samples) -> float:
    """Closed-form CF distance to the standard normal under the Gaussian
    weight (2 pi)^{-1/2} e^{-u^2/2}:

        (1/M^2) sum_{j,k} e^{-(R_j-R_k)^2/2}
        - sqrt(2) (1/M) sum_j e^{-R_j^2/4} + 1/sqrt(3).
    """
    R = np.asarray(samples, dtype=float).ravel()
    M = R.size
    if M == 0:
        raise EmptySampleError("epps_pulley_loss needs at least one sample")
    pair = 0.0
    step = max(1, int(_ROW_CHUNK // M))
    for lo in range(0, M, step):
        d = R[lo:lo + step, None] - R[None, :]
        pair += float(np.sum(np.exp(-0.5 * d * d)))
    single = float(np.sum(np.exp(-0.25 * R * R)))
    return pair / M**2 - np.sqrt(2.0) / M * single + 1.0 / np.sqrt(3.0)


def bernoulli_loss(p: float, grid: FrequencyGrid) -> float:
    """Loss of a Bernoulli(p) law on {0, 1} against the point mass at 1:
    C_w (1-p)^2 with C_w = sum_l beta_l |e^{i u_l} - 1|^2."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    c_w = float(np.sum(grid.weights * 2.0 * (1.0 - np.cos(grid.nodes))))
    return c_w * (1.0 - p) ** 2


def bias_bound(grid: FrequencyGrid, grad_R_bound: float, M: int) -> float:
    """Estimator bias bound S/M with S = 4 * grad_R_bound * sum_l |beta_l u_l|."""
    if M < 1:
        raise ParameterError(f"M must be >= 1, got {M}")
    if not grad_R_bound > 0:
        raise DomainError(f"grad_R_bound must be positive, got {grad_R_bound}")
    s_hat = 4.0 * grad_R_bound * float(np.sum(np.abs(grid.weights * grid.nodes)))
    return s_hat / M
