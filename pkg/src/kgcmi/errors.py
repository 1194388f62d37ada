"""Exception types shared across the package."""


class KgCmiError(Exception):
    """Base class for all package errors."""


class ShapeError(KgCmiError, ValueError):
    pass


class ConfigError(KgCmiError, ValueError):
    pass


class InputError(KgCmiError, ValueError):
    pass


class GraphError(KgCmiError, ValueError):
    pass


class NumericError(KgCmiError, ArithmeticError):
    pass
