"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError and bad usage exit 2, everything else
that escapes a subcommand exits 1.
"""


class DimensionError(ValueError):
    """Tensor extents violate an op's shape contract."""


class ContractError(RuntimeError):
    """API misuse: non-scalar loss, stale or consumed tape, missing grads."""


class ConfigError(ValueError):
    """Bad configuration key or value."""


class DataError(RuntimeError):
    """Dataset or image-file problem."""


class CheckpointFormatError(RuntimeError):
    """Malformed checkpoint file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; carries diagnostics gathered at the failing step."""

    def __init__(self, message: str, iteration: int, lr: float, grad_norms: dict):
        super().__init__(message)
        self.iteration = iteration
        self.lr = lr
        self.grad_norms = grad_norms
