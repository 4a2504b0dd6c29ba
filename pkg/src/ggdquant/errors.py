"""Exception types shared across the package.

Domain errors (bad statistics, formulas evaluated outside their range) map to
CLI exit code 1; I/O and parse failures map to exit code 2.
"""


class QuantDomainError(ValueError):
    """A quantization computation cannot proceed with the given values."""


class InvalidSampleError(QuantDomainError):
    """Input samples are empty or contain non-finite values."""


class DegenerateStatsError(QuantDomainError):
    """Statistics are unusable (all zeros, zero variance, overflow in Gamma)."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer!r}: {message}"
        super().__init__(message)
        self.layer = layer


class AsymptoticDomainError(QuantDomainError):
    """A closed-form quantizer expression is undefined for these arguments."""


class ModelError(ValueError):
    """A network model is malformed or an input does not fit it."""


class FormatError(Exception):
    """A file could not be read or does not follow its declared schema."""
