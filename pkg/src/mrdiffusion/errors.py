"""Exception hierarchy shared across the package.

The CLI maps each class onto a process exit code.
"""


class MRDiffusionError(Exception):
    exit_code = 1


class InvalidInputError(MRDiffusionError, ValueError):
    """Arguments violate a documented precondition."""

    exit_code = 2


class ConfigError(MRDiffusionError):
    exit_code = 2


class DataError(MRDiffusionError):
    """Missing, corrupt or incompatible files on disk."""

    exit_code = 3


class FormatError(DataError):
    pass


class IncompatibleCheckpointError(DataError):
    pass


class NumericalError(MRDiffusionError, ArithmeticError):
    exit_code = 4
