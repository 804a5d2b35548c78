"""Exception hierarchy shared across the package."""


class CtrStackError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(CtrStackError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class SchemaError(CtrStackError):
    pass


class ConfigError(CtrStackError, ValueError):
    pass


class SplitError(CtrStackError, ValueError):
    pass


class DimensionError(CtrStackError, ValueError):
    pass


class OptimizationError(CtrStackError, ArithmeticError):
    pass


class TrainingError(CtrStackError, ArithmeticError):
    pass
