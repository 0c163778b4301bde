"""Frequency grids, weight functions, and characteristic functions.

The loss lives on a uniform grid of frequency nodes u_l = -K + l*(2K/L),
l = 0..L-1, with rectangle-rule weights beta_l = exp(-alpha*u_l^2) * (2K/L).
Targets are either analytic characteristic functions evaluated in closed
form or empirical ones averaged from samples.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.special

from .errors import (
    DomainError,
    EmptySampleError,
    GridError,
    IOFormatError,
    ParameterError,
    UnboundedTailError,
)

TARGET_KINDS = (
    "empirical-samples",
    "standard-normal",
    "epanechnikov",
    "dirac-at",
    "wrapped-gaussian",
    "table-file",
)

_CF_CHUNK = 1 << 22  # cap on nodes*samples entries evaluated at once


@dataclass(frozen=True)
class FrequencyGrid:
    """Uniform frequency grid on [-K, K) with Gaussian-decay weights."""

    k_max: float
    n_nodes: int
    alpha: float
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def du(self) -> float:
        return 2.0 * self.k_max / self.n_nodes

    def same_nodes(self, other: "FrequencyGrid") -> bool:
        return self.nodes.shape == other.nodes.shape and bool(
            np.all(self.nodes == other.nodes)
        )


@dataclass(frozen=True)
class CFTable:
    """Characteristic-function values tabulated on a grid."""

    grid: FrequencyGrid
    values: np.ndarray  # complex128, shape (L,)


@dataclass(frozen=True)
class TargetSpec:
    """Description of a target law for the terminal cumulative reward.

    ``kind`` selects the family; the remaining fields are kind-specific:
    ``samples`` or ``path`` for empirical-samples, ``c`` for dirac-at,
    ``(m, sigma2)`` for wrapped-gaussian, ``path`` for table-file.
    """

    kind: str
    c: float = 0.0
    m: float = 0.0
    sigma2: float = 1.0
    samples: Optional[np.ndarray] = None
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ParameterError(f"unknown target kind {self.kind!r}")
        if self.kind == "wrapped-gaussian" and not self.sigma2 > 0:
            raise ParameterError(f"wrapped-gaussian needs sigma2 > 0, got {self.sigma2}")
        if self.kind == "empirical-samples":
            if self.samples is None and self.path is None:
                raise ParameterError("empirical-samples target needs samples or a path")
            if self.samples is not None:
                arr = np.asarray(self.samples, dtype=float).ravel()
                if arr.size == 0:
                    raise ParameterError("empirical-samples target needs >= 1 sample")
                object.__setattr__(self, "samples", arr)
        if self.kind == "table-file" and self.path is None:
            raise ParameterError("table-file target needs a path")

    @staticmethod
    def dirac(c: float) -> "TargetSpec":
        return TargetSpec(kind="dirac-at", c=float(c))

    @staticmethod
    def standard_normal() -> "TargetSpec":
        return TargetSpec(kind="standard-normal")

    @staticmethod
    def epanechnikov() -> "TargetSpec":
        return TargetSpec(kind="epanechnikov")

    @staticmethod
    def wrapped_gaussian(m: float, sigma2: float) -> "TargetSpec":
        return TargetSpec(kind="wrapped-gaussian", m=float(m), sigma2=float(sigma2))

    @staticmethod
    def empirical(samples) -> "TargetSpec":
        return TargetSpec(kind="empirical-samples", samples=np.asarray(samples, float))

    @staticmethod
    def table(path: str) -> "TargetSpec":
        return TargetSpec(kind="table-file", path=path)


def build_uniform_grid(K: float, L: int, alpha: float) -> FrequencyGrid:
    """Grid with nodes u_l = -K + l*(2K/L) and weights exp(-alpha*u_l^2)*Δu.

    The grid is asymmetric by one node (last node K - Δu); the node formula is
    kept exact rather than symmetrized.
    """
    if not K > 0:
        raise ParameterError(f"K must be positive, got {K}")
    if L < 2 or int(L) != L:
        raise ParameterError(f"L must be an integer >= 2, got {L}")
    if alpha < 0:
        raise ParameterError(f"alpha must be nonnegative, got {alpha}")
    du = 2.0 * K / L
    nodes = -K + np.arange(L, dtype=float) * du
    weights = np.exp(-alpha * nodes**2) * du
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return FrequencyGrid(k_max=float(K), n_nodes=int(L), alpha=float(alpha),
                         nodes=nodes, weights=weights)


def empirical_cf(samples, grid: FrequencyGrid) -> CFTable:
    """Empirical characteristic function (1/M) sum_j e^{i u R_j} on the grid.

    Evaluated in chunks so large sample sets never materialize an L x M
    matrix.
    """
    R = np.asarray(samples, dtype=float).ravel()
    if R.size == 0:
        raise EmptySampleError("empirical_cf needs at least one sample")
    u = grid.nodes
    step = max(1, int(_CF_CHUNK // max(u.size, 1)))
    acc = np.zeros(u.size, dtype=complex)
    for lo in range(0, R.size, step):
        arg = np.outer(u, R[lo:lo + step])
        acc += np.exp(1j * arg).sum(axis=1)
    values = acc / R.size
    values.setflags(write=False)
    return CFTable(grid=grid, values=values)


def _epanechnikov_cf(u: np.ndarray) -> np.ndarray:
    """phi_E(u) = 3 u^-3 (sin u - u cos u), Taylor series below |u| = 1e-2."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    small = np.abs(u) < 1e-2
    us = u[small]
    u2 = us * us
    out[small] = 1.0 + u2 * (-1.0 / 10.0 + u2 * (1.0 / 280.0
                 + u2 * (-1.0 / 15120.0 + u2 / 1330560.0)))
    ub = u[~small]
    out[~small] = 3.0 * (np.sin(ub) - ub * np.cos(ub)) / ub**3
    return out


def epanechnikov_density(x) -> np.ndarray:
    """Density (3/4)(1 - x^2) on [-1, 1], zero outside."""
    xa = np.asarray(x, dtype=float)
    return np.where(np.abs(xa) <= 1.0, 0.75 * (1.0 - xa**2), 0.0)


def load_samples(path: str) -> np.ndarray:
    """Sample file: one real per line, decimal notation."""
    try:
        data = np.loadtxt(path, dtype=float, ndmin=1)
    except OSError as exc:
        raise IOFormatError(f"cannot read sample file {path}: {exc}") from exc
    except ValueError as exc:
        raise IOFormatError(f"malformed sample file {path}: {exc}") from exc
    if data.size == 0:
        raise EmptySampleError(f"sample file {path} is empty")
    return data.ravel()


def _load_cf_table(path: str, grid: FrequencyGrid) -> np.ndarray:
    try:
        raw = np.genfromtxt(path, delimiter=",", names=True, dtype=float)
    except OSError as exc:
        raise IOFormatError(f"cannot read CF table {path}: {exc}") from exc
    if raw.dtype.names is None or not {"u", "re", "im"} <= set(raw.dtype.names):
        raise IOFormatError(f"CF table {path} must have header u,re,im")
    u = np.atleast_1d(raw["u"])
    if u.shape != grid.nodes.shape or not np.all(u == grid.nodes):
        raise GridError(f"CF table nodes in {path} do not match the active grid")
    return np.atleast_1d(raw["re"]) + 1j * np.atleast_1d(raw["im"])


def target_cf(spec: TargetSpec, grid: FrequencyGrid) -> CFTable:
    """Evaluate the target characteristic function on the grid.

    Analytic kinds use closed forms; ``wrapped-gaussian`` is defined only at
    integer nodes (Fourier coefficients of a law on the circle) and raises a
    domain error elsewhere.
    """
    u = grid.nodes
    if spec.kind == "dirac-at":
        values = np.exp(1j * u * spec.c)
    elif spec.kind == "standard-normal":
        values = np.exp(-0.5 * u**2) + 0j
    elif spec.kind == "epanechnikov":
        values = _epanechnikov_cf(u) + 0j
    elif spec.kind == "wrapped-gaussian":
        n = np.rint(u)
        if np.max(np.abs(u - n)) > 1e-9:
            raise DomainError("wrapped-gaussian target needs integer frequency nodes")
        values = np.exp(-1j * n * spec.m) * np.exp(-0.5 * spec.sigma2 * n**2)
    elif spec.kind == "empirical-samples":
        samples = spec.samples if spec.samples is not None else load_samples(spec.path)
        return empirical_cf(samples, grid)
    elif spec.kind == "table-file":
        values = _load_cf_table(spec.path, grid)
    else:  # pragma: no cover - TargetSpec validates kinds
        raise ParameterError(f"unknown target kind {spec.kind!r}")
    values = np.asarray(values, dtype=complex)
    values.setflags(write=False)
    return CFTable(grid=grid, values=values)


def cf_tail_mass(spec: TargetSpec, K: float, alpha: float) -> float:
    """Upper bound 4 * integral_{|u|>K} e^{-alpha u^2} du on the loss mass
    ignored by truncating to [-K, K], using |phi* - phi|^2 <= 4.

    Independent of the target, hence valid for any ``spec``.
    """
    if not K > 0:
        raise ParameterError(f"K must be positive, got {K}")
    if alpha <= 0:
        raise UnboundedTailError("tail mass unbounded for alpha <= 0")
    return float(4.0 * np.sqrt(np.pi / alpha) * scipy.special.erfc(K * np.sqrt(alpha)))
