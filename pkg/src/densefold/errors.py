"""Exception taxonomy shared by all densefold modules.

The CLI maps these onto process exit codes: configuration problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class DensefoldError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DensefoldError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(DensefoldError):
    """Invalid configuration value (hyperparameter, network spec, flag)."""


class InputError(DensefoldError):
    """Input data violates the operation's contract (bad label, empty batch)."""


class ContractError(DensefoldError):
    """API misuse: stale cache, mismatched key sets, wrong mode."""


class FormatError(DensefoldError):
    """Malformed serialized data. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DensefoldError):
    """Non-finite values where finite values are required (NaN/Inf abort)."""
