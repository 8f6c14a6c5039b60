"""Exception hierarchy shared across the package."""


class DynsurvError(Exception):
    """Base class for all package-specific errors."""


class DataError(DynsurvError):
    """Malformed or inconsistent input data (bad CSV cell, orphan id, ...)."""


class NumericalError(DynsurvError):
    """A numerical routine could not produce a usable result."""


class SpecificationError(DynsurvError):
    """An invalid model/metric configuration (e.g. no landmark analog)."""


class UndefinedMetricError(DynsurvError):
    """A metric has no defined value on this data (e.g. no comparable pairs)."""
