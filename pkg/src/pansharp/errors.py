"""Exception hierarchy shared across the package."""


class PansharpError(Exception):
    """Base class for all package errors."""


class ContractViolation(PansharpError, ValueError):
    """An operation was called with inputs that break its preconditions."""


class NumericDomainError(PansharpError, ArithmeticError):
    """A numeric operation left its mathematical domain (e.g. division by zero)."""


class NumericFailure(PansharpError, FloatingPointError):
    """A loss or optimisation step produced non-finite values."""

    def __init__(self, message, iteration=None, last_weights=None):
        super().__init__(message)
        self.iteration = iteration
        self.last_weights = last_weights


class UnsupportedConfiguration(PansharpError, ValueError):
    """A configuration value is outside what the implementation supports."""


class RasterLoadError(PansharpError, IOError):
    """Base class for raster file problems."""


class MalformedHeader(RasterLoadError):
    pass


class TruncatedPayload(RasterLoadError):
    pass


class NonFiniteValues(RasterLoadError):
    pass


class DegenerateReference(PansharpError, ValueError):
    """A reference band has zero mean, so a relative metric is undefined."""

    def __init__(self, bands):
        self.bands = list(bands)
        super().__init__(f"reference bands with zero mean: {self.bands}")


class InsufficientSupport(PansharpError, ValueError):
    """Not enough valid pixels remain to estimate a statistic."""
