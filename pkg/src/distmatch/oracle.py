"""Analytic ground-truth solvers for the worked examples.

Two independent routes to a policy, used to certify trained ones:

* The cosine-reward matching problem: expand the characteristic function of
  V*cos(s0 + a + sigma*eps) through the Jacobi-Anger identity
  e^{iz cos t} = sum_k i^k J_k(z) e^{ikt}, truncate to |k| <= K, and solve a
  real least-squares system for x_k = Re(i^k e^{i k s0} psi_A(k)), where
  psi_A(k) = E[e^{ik a}] are the Fourier modes of the action law.  Fourier
  inversion of the modes gives the action density on a 2*pi interval.

* The one-step torus problem: with s1 = (s0 + a + eps) mod 2*pi and
  integer-mode CFs, the action law solves the deconvolution
  nu_hat(n) = mu_hat*(n) e^{i n s0} e^{sigma^2 n^2 / 2} exactly; targets whose
  deconvolved modes exceed unit modulus are not achievable by any action law.

The matching equation is even in the frequency for real symmetric targets,
which forces the odd modes to vanish.  The uniform grid misses the +K
endpoint, so the solver closes the node set under u -> -u by appending that
one row; without it the lost parity leaks ~1e-8 into the odd modes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .charfn import CFTable, FrequencyGrid
from .errors import (
    DomainError,
    EmptySampleError,
    InfeasibleTargetError,
    ModeRankError,
    ParameterError,
    RankDeficiencyError,
    SymmetryError,
)
from .numerics import MAX_BESSEL_ORDER, RandomStream, bessel_j, least_squares

TWO_PI = 2.0 * np.pi

_SYMMETRY_TOL = 1e-9
_MODULUS_TOL = 1e-9
_RIDGE = 1e-10
#: truncating the mode expansion leaves lobes of this size below zero
DENSITY_FLOOR = -1e-3


@dataclass(frozen=True)
class JacobiAngerProblem:
    """Cosine-environment matching instance: R = V*cos(s0 + a + sigma*eps)."""

    s0: float
    sigma: float
    V: float = 1.0
    k_modes: int = 16
    grid: Optional[FrequencyGrid] = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if not self.V > 0:
            raise ParameterError(f"V must be positive, got {self.V}")
        if not 1 <= self.k_modes <= MAX_BESSEL_ORDER:
            raise ParameterError(
                f"k_modes must lie in [1, {MAX_BESSEL_ORDER}], got {self.k_modes}")


@dataclass(frozen=True)
class ModeSolution:
    """Solved action-law Fourier modes psi_A(0..K); psi_A(-k) = conj(psi_A(k))."""

    x: np.ndarray              # K real unknowns x_k, k = 1..K
    psi: np.ndarray            # K+1 complex modes psi_A(0..K), psi_A(0) = 1
    residual_norm: float       # RMS residual of the solved linear system
    odd_mode_max: float        # max |x_k| over odd k


@dataclass(frozen=True)
class ActionDensity:
    """Tabulated action density p(x) on a sub-interval of one period."""

    interval: Tuple[float, float]
    xs: np.ndarray
    values: np.ndarray
    modes: ModeSolution
    interval_integral: float
    period_integral: float
    min_density: float


def _solve_rows(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return least_squares(A, b)
    except RankDeficiencyError as first:
        K = A.shape[1]
        ridged = np.vstack([A, np.sqrt(_RIDGE) * np.eye(K)])
        rhs = np.concatenate([b, np.zeros(K)])
        try:
            return least_squares(ridged, rhs)
        except RankDeficiencyError as exc:
            raise ModeRankError(first.column + 1) from exc


def solve_modes(problem: JacobiAngerProblem, target: CFTable) -> ModeSolution:
    """Solve the truncated linear system A x = b for the action modes.

    A[l, k-1] = 2 J_k(u_l V) e^{-k^2 sigma^2 / 2} for k = 1..K and
    b_l = phi*(u_l) - J_0(u_l V); afterwards
    psi_A(k) = i^{-k} e^{-i k s0} x_k.  The target must be real symmetric
    (the derivation matches a real even CF).  If the plain QR solve reports
    rank deficiency (high modes with large sigma underflow), a 1e-10 ridge
    is added; deficiency even then raises with the offending mode index.
    """
    if np.max(np.abs(target.values.imag)) > _SYMMETRY_TOL:
        raise SymmetryError(
            "target CF has imaginary part above 1e-9; the mode expansion "
            "requires a real symmetric target")
    grid = target.grid
    nodes = grid.nodes
    phi = target.values.real
    # close the node set under u -> -u (the uniform grid omits +K);
    # the appended right-hand side is phi*(+K) = phi*(-K) by symmetry
    if -nodes[0] not in nodes:
        nodes = np.append(nodes, -nodes[0])
        phi = np.append(phi, phi[0])
    K = problem.k_modes
    ks = np.arange(1, K + 1)
    damp = np.exp(-0.5 * problem.sigma**2 * ks.astype(float) ** 2)
    A = np.empty((nodes.size, K))
    for i, k in enumerate(ks):
        A[:, i] = 2.0 * bessel_j(int(k), nodes * problem.V) * damp[i]
    b = phi - bessel_j(0, nodes * problem.V)
    x = _solve_rows(A, b)
    residual = A @ x - b
    rms = float(np.linalg.norm(residual) / np.sqrt(nodes.size))
    psi = np.empty(K + 1, dtype=complex)
    psi[0] = 1.0
    psi[1:] = (1j) ** (-ks.astype(float)) * np.exp(-1j * ks * problem.s0) * x
    big = np.abs(psi) > 1.0 + _MODULUS_TOL
    if big.any():
        warnings.warn(
            f"modes {np.nonzero(big)[0].tolist()} exceed unit modulus; "
            "clipping to the unit circle", RuntimeWarning)
        psi[big] /= np.abs(psi[big])
    odd_max = float(np.max(np.abs(x[0::2]))) if K >= 1 else 0.0
    x = np.asarray(x, dtype=float)
    x.setflags(write=False)
    psi.setflags(write=False)
    return ModeSolution(x=x, psi=psi, residual_norm=rms, odd_mode_max=odd_max)


def forward_cf(solution: ModeSolution, problem: JacobiAngerProblem) -> CFTable:
    """CF of V*cos(s0 + a + sigma*eps) implied by the solved modes:

    phi(u) = sum_{|k| <= K} i^k J_k(uV) e^{i k s0} e^{-k^2 sigma^2/2} psi_A(k),

    evaluated on the problem grid using psi_A(-k) = conj(psi_A(k)) and
    J_{-k} = (-1)^k J_k.
    """
    if problem.grid is None:
        raise ParameterError("problem carries no frequency grid")
    u = problem.grid.nodes
    values = bessel_j(0, u * problem.V).astype(complex)
    for k in range(1, problem.k_modes + 1):
        damp = np.exp(-0.5 * problem.sigma**2 * k**2)
        J = bessel_j(k, u * problem.V)
        phase = (1j) ** k * np.exp(1j * k * problem.s0)
        plus = phase * J * damp * solution.psi[k]
        minus = np.conj(phase) * ((-1) ** k) * J * damp * np.conj(solution.psi[k])
        values += plus + minus
    values.setflags(write=False)
    return CFTable(grid=problem.grid, values=values)


def reconstruct_density(solution: ModeSolution, interval: Tuple[float, float],
                        n_points: int) -> ActionDensity:
    """Fourier inversion p(x) = (1/2pi)(1 + 2 sum_k Re(psi_A(k) e^{-ikx})).

    Tabulates p on ``n_points`` uniform points of ``interval`` (at most one
    period wide) and reports the trapezoid integrals over the interval and
    over a full period, plus the most negative tabulated value (mode
    truncation leaves small negative lobes).
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise DomainError(f"empty interval {interval}")
    if hi - lo > TWO_PI + 1e-12:
        raise DomainError(f"interval {interval} is wider than one period")
    if n_points < 2:
        raise ParameterError(f"n_points must be >= 2, got {n_points}")
    xs = np.linspace(lo, hi, n_points)
    values = _density_values(solution, xs)
    full = np.linspace(lo, lo + TWO_PI, max(n_points, 2048))
    period_integral = float(np.trapezoid(_density_values(solution, full), full))
    xs.setflags(write=False)
    values.setflags(write=False)
    return ActionDensity(
        interval=(lo, hi), xs=xs, values=values, modes=solution,
        interval_integral=float(np.trapezoid(values, xs)),
        period_integral=period_integral,
        min_density=float(values.min()),
    )


def _density_values(solution: ModeSolution, xs: np.ndarray) -> np.ndarray:
    acc = np.ones_like(xs)
    for k in range(1, solution.psi.size):
        acc += 2.0 * (solution.psi[k] * np.exp(-1j * k * xs)).real
    return acc / TWO_PI


def sample_action_density(density: ActionDensity, stream: RandomStream,
                          n: int) -> np.ndarray:
    """Inverse-CDF draws from the tabulated density.

    Negative truncation lobes are clipped to zero and the mass renormalized
    before building the piecewise-linear CDF.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    p = np.clip(density.values, 0.0, None)
    xs = density.xs
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(xs))])
    if cdf[-1] <= 0:
        raise DomainError("density carries no positive mass on the interval")
    cdf /= cdf[-1]
    uniforms = stream.generator().random(n)
    return np.interp(uniforms, cdf, xs)


def estimate_modes(action_samples, k_modes: int) -> np.ndarray:
    """Empirical Fourier modes psi_hat(k) = (1/M) sum_j e^{i k a_j}, k = 0..K."""
    a = np.asarray(action_samples, dtype=float).ravel()
    if a.size == 0:
        raise EmptySampleError("estimate_modes needs at least one sample")
    if k_modes < 0:
        raise ParameterError(f"k_modes must be >= 0, got {k_modes}")
    ks = np.arange(k_modes + 1)
    return np.exp(1j * np.outer(ks, a)).mean(axis=1)


def torus_deconvolve(target_modes, s0: float, sigma: float) -> np.ndarray:
    """Action-law modes nu_hat(n) = mu_hat*(n) e^{i n s0} e^{sigma^2 n^2 / 2}.

    ``target_modes`` holds mu_hat*(n) for n = -N..N in index order; the
    center entry must be 1 (a characteristic function at n = 0).  Deconvolved
    modes above unit modulus mean the target is rougher than the noise
    allows: no action distribution produces it, and the violating n are
    reported.
    """
    mu = np.asarray(target_modes, dtype=complex).ravel()
    if mu.size % 2 != 1:
        raise ParameterError("target_modes must cover n = -N..N (odd length)")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    N = mu.size // 2
    n = np.arange(-N, N + 1)
    if abs(mu[N] - 1.0) > 1e-12:
        raise DomainError("mu_hat*(0) must equal 1")
    nu = mu * np.exp(1j * n * s0) * np.exp(0.5 * sigma**2 * n.astype(float) ** 2)
    bad = np.abs(nu) > 1.0 + _MODULUS_TOL
    if bad.any():
        raise InfeasibleTargetError(sorted(int(v) for v in n[bad]))
    nu.setflags(write=False)
    return nu
