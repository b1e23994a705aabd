"""Exception hierarchy shared by every module of the package."""


class VmsegError(Exception):
    """Base class for all package errors."""


class DimensionError(VmsegError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(VmsegError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(VmsegError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(VmsegError, ValueError):
    """A dataset, split, or batch is empty or malformed."""


class BoundsError(VmsegError, IndexError):
    """A region falls outside the image it indexes."""


class CheckpointFormatError(VmsegError, ValueError):
    """A checkpoint blob failed validation.

    ``field`` names the part of the format that was rejected
    (``magic``, ``version``, ``payload``, ``name``, ...).
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteError(VmsegError, FloatingPointError):
    """An operation produced NaN or Inf while the finite guard was active."""

    def __init__(self, op: str, message: str | None = None):
        super().__init__(message or f"op '{op}' produced non-finite values")
        self.op = op


class DivergenceError(NonFiniteError):
    """Training diverged; ``epoch`` is the 1-based epoch where it happened."""

    def __init__(self, epoch: int, op: str = "loss"):
        super().__init__(op, f"training diverged at epoch {epoch} (non-finite value from '{op}')")
        self.epoch = epoch


class NonSmoothError(ContractError):
    """A finite-difference stencil crossed a ReLU or max-pool kink."""

    def __init__(self, index: int, eps: float):
        super().__init__(f"perturbing entry {index} by +/-{eps:g} changes a ReLU/max branch")
        self.index = index
        self.eps = eps
