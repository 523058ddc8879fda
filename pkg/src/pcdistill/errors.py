"""Exception types shared across the package."""


class PcdistillError(Exception):
    """Base class for all package errors."""


class DimensionError(PcdistillError):
    """Tensor shapes do not conform for the requested operation."""


class ParameterError(PcdistillError):
    """A numeric parameter is outside its valid range."""


class ContractError(PcdistillError):
    """A caller violated an API precondition."""


class ConfigError(PcdistillError):
    """A model or run configuration is internally inconsistent."""


class DataError(PcdistillError):
    """Input data is malformed (non-finite values, bad labels, ...)."""


class FormatError(PcdistillError):
    """A binary artifact failed validation.

    Carries the byte offset at which the problem was detected when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(FormatError):
    """An artifact's schema id does not match the configured schema."""


class TrainingError(PcdistillError):
    """Training failed (divergence, non-finite loss component, ...)."""


class OptimizerError(PcdistillError):
    """The optimizer received invalid gradients."""


class OracleError(PcdistillError):
    """A verification oracle could not be evaluated."""


class NumericError(PcdistillError):
    """An operation received or produced non-finite values."""
