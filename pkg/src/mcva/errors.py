"""Exception types raised across the package."""


class MCVAError(Exception):
    """Base class for all package errors."""


class ShapeError(MCVAError, ValueError):
    pass


class ConfigError(MCVAError, ValueError):
    pass


class NumericalError(MCVAError, ArithmeticError):
    pass


class EmptyKeySet(MCVAError, ValueError):
    pass


class AllTokensMasked(MCVAError, ValueError):
    pass


class FormatError(MCVAError, ValueError):
    pass


class DatasetError(MCVAError, RuntimeError):
    pass


class DivergedError(MCVAError, RuntimeError):
    pass
