"""Exception hierarchy for distmatch.

Every failure mode raised by the library derives from :class:`DistmatchError`,
so callers can catch one type at the boundary.  Subclasses carry the fields a
caller needs to act on the failure (offending column, trajectory index, mode
number, ...) instead of burying them in the message string.
"""

from __future__ import annotations


class DistmatchError(Exception):
    """Base class for all distmatch errors."""


class DomainError(DistmatchError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ParameterError(DistmatchError, ValueError):
    """A configuration value is malformed or out of range."""


class LengthError(DistmatchError, ValueError):
    """Paired sample lists have mismatched lengths."""


class EmptySampleError(DistmatchError, ValueError):
    """An operation that needs at least one sample received none."""


class UnsupportedOrderError(DistmatchError, ValueError):
    """Bessel order above the supported cap."""

    def __init__(self, order: int, cap: int):
        self.order = order
        self.cap = cap
        super().__init__(f"Bessel order {order} above supported cap {cap}")


class RankDeficiencyError(DistmatchError, ValueError):
    """Least-squares matrix is numerically rank deficient.

    ``column`` is the index (0-based) of the first column whose R-diagonal
    fell below the rank threshold, i.e. the column that is numerically a
    linear combination of its predecessors.
    """

    def __init__(self, column: int, diag: float, threshold: float):
        self.column = column
        self.diag = diag
        self.threshold = threshold
        super().__init__(
            f"rank-deficient matrix: |R[{column},{column}]| = {diag:.3e} "
            f"below threshold {threshold:.3e}"
        )


class StageError(DistmatchError, ValueError):
    """A stage index t lies outside the horizon of an environment."""


class CapabilityError(DistmatchError, ValueError):
    """An operation was asked for data the object does not carry."""


class GridError(DistmatchError, ValueError):
    """Frequency grids of two objects do not match."""


class UnboundedTailError(DistmatchError, ValueError):
    """Tail-mass bound requested for a weight with no Gaussian decay."""


class DivergenceError(DistmatchError, FloatingPointError):
    """A simulated trajectory produced a non-finite state or reward."""

    def __init__(self, trajectory: int, stage: int, what: str):
        self.trajectory = trajectory
        self.stage = stage
        self.what = what
        super().__init__(
            f"non-finite {what} in trajectory {trajectory} at stage {stage}"
        )


class MemoryBudgetError(DistmatchError, MemoryError):
    """A dense sensitivity batch would exceed the configured memory budget."""

    def __init__(self, required: int, budget: int):
        self.required = required
        self.budget = budget
        super().__init__(
            f"dense sensitivity batch needs {required} bytes, budget is {budget}; "
            "use the streaming gradient path"
        )


class SymmetryError(DistmatchError, ValueError):
    """Target characteristic function is not real-valued symmetric."""


class ModeRankError(DistmatchError, ValueError):
    """Jacobi-Anger system rank deficient even after ridge regularization."""

    def __init__(self, mode: int):
        self.mode = mode
        super().__init__(f"Jacobi-Anger system rank deficient at mode k={mode}")


class InfeasibleTargetError(DistmatchError, ValueError):
    """Deconvolved action modes exceed unit modulus: no action law exists."""

    def __init__(self, modes: list[int]):
        self.modes = modes
        super().__init__(
            "target not reachable by any action distribution; "
            f"|nu_hat(n)| > 1 at n in {modes}"
        )


class ConfigError(DistmatchError, ValueError):
    """A run configuration file failed schema validation.

    ``path`` is the JSON path of the offending key.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class IOFormatError(DistmatchError, ValueError):
    """A delimited input file is unreadable or malformed."""
