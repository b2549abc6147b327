"""Exception hierarchy shared by every attnlens module."""


class AttnLensError(Exception):
    """Base class for all errors raised by attnlens."""


class DimensionError(AttnLensError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(AttnLensError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(AttnLensError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(AttnLensError, ValueError):
    """Model or run configuration is invalid."""


class WeightError(AttnLensError, KeyError):
    """Weights are missing, unknown or have the wrong shape."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(AttnLensError, ValueError):
    """A file does not follow its declared on-disk layout."""


class UnsupportedVariantError(AttnLensError, ValueError):
    """Operation is not defined for this model variant."""
