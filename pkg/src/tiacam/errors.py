"""Exception hierarchy. CLI exit codes hang off the last three classes."""


class TiacamError(Exception):
    pass


class ShapeError(TiacamError, ValueError):
    pass


class NonFiniteError(TiacamError, FloatingPointError):
    pass


class ConfigError(TiacamError, ValueError):
    exit_code = 2


class ConvergenceError(TiacamError, RuntimeError):
    exit_code = 3


class DataError(TiacamError, ValueError):
    exit_code = 4
