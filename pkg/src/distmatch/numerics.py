"""Numeric kernels shared by every other module.

Complex quantities are plain ``complex`` / ``numpy.complex128`` values
throughout the package; randomness flows through counter-based
:class:`RandomStream` handles so that every draw is a pure function of
``(seed, stream_id, block)`` and results cannot depend on thread count or
batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .errors import (
    DomainError,
    EmptySampleError,
    LengthError,
    RankDeficiencyError,
    UnsupportedOrderError,
)

MAX_BESSEL_ORDER = 64
MAX_BESSEL_ARG = 1.0e4
RANK_TOLERANCE = 1e-12

_UINT64_SPAN = 2**64


@dataclass(frozen=True)
class RandomStream:
    """Immutable key for a counter-based pseudo-random stream.

    Streams with equal ``(seed, stream_id)`` reproduce the same sequence;
    distinct ``stream_id`` values give statistically independent sequences.
    Draws come from the Philox-4x64 counter-based generator: ``generator(block)``
    positions the 256-bit counter at ``block * 2**64``, so different blocks
    yield disjoint draw ranges.  Simulation code assigns one block per
    trajectory, which makes batches bit-identical regardless of how the
    trajectories are split across workers.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= v < _UINT64_SPAN:
                raise DomainError(f"{name} must be an unsigned 64-bit integer, got {v!r}")

    def generator(self, block: int = 0) -> np.random.Generator:
        """Fresh generator positioned at the start of counter block ``block``."""
        if not 0 <= block < _UINT64_SPAN:
            raise DomainError(f"block must be an unsigned 64-bit integer, got {block!r}")
        bits = np.random.Philox(key=[self.seed, self.stream_id], counter=[0, block, 0, 0])
        return np.random.Generator(bits)


def standard_normal(stream: RandomStream, n: int) -> np.ndarray:
    """``n`` i.i.d. standard-normal draws from ``stream``.

    Pure: calling twice with the same arguments returns identical arrays.
    """
    if n < 0:
        raise DomainError(f"n must be nonnegative, got {n}")
    return stream.generator().standard_normal(n)


def derive_seed(seed: int, index: int) -> int:
    """Deterministically derive a fresh 64-bit seed from (seed, index).

    Used for restart re-initialization: restart r of a run seeded with s draws
    its parameters from ``derive_seed(s, r)``.  SplitMix64 finalizer, so nearby
    (seed, index) pairs map to well-separated outputs.
    """
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) % _UINT64_SPAN
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % _UINT64_SPAN
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % _UINT64_SPAN
    return z ^ (z >> 31)


def bessel_j(order: int, x):
    """Bessel function of the first kind J_order(x).

    Supports integer orders 0..64 and |x| <= 1e4, which covers every mode /
    frequency-node product used by the Fourier oracles.  ``x`` may be a scalar
    or an array.  For negative orders use J_{-k}(x) = (-1)^k J_k(x) caller-side.
    """
    if order < 0 or int(order) != order:
        raise DomainError(f"order must be a nonnegative integer, got {order!r}")
    if order > MAX_BESSEL_ORDER:
        raise UnsupportedOrderError(int(order), MAX_BESSEL_ORDER)
    xa = np.asarray(x, dtype=float)
    if np.any(np.abs(xa) > MAX_BESSEL_ARG):
        raise DomainError(f"|x| must be <= {MAX_BESSEL_ARG:g}")
    out = scipy.special.jv(int(order), xa)
    return float(out) if np.isscalar(x) or xa.ndim == 0 else out


def least_squares(matrix, rhs) -> np.ndarray:
    """Minimize ||A x - b||_2 by Householder QR.

    Raises :class:`RankDeficiencyError` (carrying the offending column index)
    when the smallest |R|-diagonal falls below ``RANK_TOLERANCE`` times the
    largest; QR rather than normal equations because the Fourier-mode systems
    solved upstream are badly scaled for high modes.
    """
    A = np.asarray(matrix, dtype=float)
    b = np.asarray(rhs, dtype=float)
    if A.ndim != 2:
        raise DomainError("matrix must be two-dimensional")
    L, K = A.shape
    if b.shape != (L,):
        raise LengthError(f"rhs length {b.shape} does not match matrix rows {L}")
    if K < 1 or L < K:
        raise DomainError(f"need rows >= columns >= 1, got {L}x{K}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise DomainError("matrix and rhs entries must be finite")

    Q, R = scipy.linalg.qr(A, mode="economic")
    diag = np.abs(np.diagonal(R))
    threshold = RANK_TOLERANCE * diag.max() if diag.max() > 0 else RANK_TOLERANCE
    deficient = np.nonzero(diag < threshold)[0]
    if deficient.size:
        col = int(deficient[0])
        raise RankDeficiencyError(col, float(diag[col]), float(threshold))
    return scipy.linalg.solve_triangular(R, Q.T @ b)


def wasserstein1(x, y) -> float:
    """W_1 distance between two equal-size empirical laws.

    Equal counts by design (all comparisons in this package use equal-size
    batches), in which case the optimal coupling is the sorted pairing and
    W_1 = mean |x_(i) - y_(i)|.
    """
    xa = np.asarray(x, dtype=float).ravel()
    ya = np.asarray(y, dtype=float).ravel()
    if xa.size == 0 or ya.size == 0:
        raise EmptySampleError("wasserstein1 needs non-empty samples")
    if xa.size != ya.size:
        raise LengthError(f"sample sizes differ: {xa.size} vs {ya.size}")
    return float(np.mean(np.abs(np.sort(xa) - np.sort(ya))))
