"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class IclrnnError(Exception):
    exit_code = 1


class DimensionError(IclrnnError, ValueError):
    exit_code = 3


class ParameterError(IclrnnError, ValueError):
    exit_code = 2


class NumericError(IclrnnError, ArithmeticError):
    """Non-finite value or divergence during a numerical routine."""

    exit_code = 3

    def __init__(self, message, *, step=None, epoch=None, time=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.time = time


class PreconditionError(IclrnnError, ValueError):
    exit_code = 3


class ScaleError(IclrnnError, ValueError):
    exit_code = 3


class DomainError(IclrnnError, ValueError):
    exit_code = 3


class ConfigError(IclrnnError, ValueError):
    exit_code = 2


class RegionError(IclrnnError, ValueError):
    exit_code = 3


class SolverError(IclrnnError, RuntimeError):
    exit_code = 3


class GenerationError(IclrnnError, RuntimeError):
    exit_code = 3


class SchemaError(IclrnnError, ValueError):
    exit_code = 4


class ParseError(IclrnnError, ValueError):
    exit_code = 4

    def __init__(self, message, *, line=None):
        super().__init__(message)
        self.line = line
