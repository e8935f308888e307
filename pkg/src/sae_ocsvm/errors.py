"""Exception hierarchy shared by every module of the package."""


class SaeOcsvmError(Exception):
    """Base class for all package errors."""


class ShapeError(SaeOcsvmError, ValueError):
    """Array dimensions are inconsistent with the requested operation."""


class GraphError(SaeOcsvmError):
    """The autodiff graph cannot produce the requested gradients."""


class NonFiniteError(SaeOcsvmError, FloatingPointError):
    """A loss or gradient contains NaN or infinite values."""


class ConvergenceError(SaeOcsvmError):
    """The dual solver hit its iteration budget before reaching tolerance."""

    def __init__(self, message, kkt_residual=float("nan"), iterations=0):
        super().__init__(message)
        self.kkt_residual = kkt_residual
        self.iterations = iterations


class DegenerateDataError(SaeOcsvmError, ValueError):
    """Input carries no usable variation (constant data, empty masks, ...)."""


class MetricError(SaeOcsvmError, ValueError):
    """A metric is undefined for the given labels."""


class ModelMismatchError(SaeOcsvmError):
    """A patient model was fitted with a different encoder."""


class PlacementError(SaeOcsvmError):
    """Phantom lesions could not be placed inside the eligible region."""


class ConfigError(SaeOcsvmError, ValueError):
    """Malformed or unknown configuration entries."""


class FormatError(SaeOcsvmError, ValueError):
    """Base class for file-format errors."""


class BadMagicError(FormatError):
    """File does not carry the expected magic bytes."""


class PayloadLengthError(FormatError):
    """Payload byte count disagrees with the header dimensions."""


class UnsupportedDtypeError(FormatError):
    """Payload datatype is not one of the supported codes."""


class MaskValueError(FormatError):
    """Mask payload contains values outside {0, 1}."""
