"""Exception hierarchy shared by all vkrige modules."""


class VKrigeError(Exception):
    """Base class for errors raised by vkrige."""


class ParameterError(VKrigeError, ValueError):
    """A tuning parameter or configuration value is out of range."""


class DomainError(VKrigeError, ValueError):
    """A numerical routine was called outside its domain."""


class UndefinedDispersionError(DomainError):
    """Too few values to compute a robust dispersion (need at least 3)."""


class UndefinedBenchmarkError(DomainError):
    """Too few neighbours to build a local benchmark (need at least 3)."""


class DataError(VKrigeError, ValueError):
    """Input data are missing, malformed or inconsistent."""


class SingularSystemError(VKrigeError, ArithmeticError):
    """A linear system could not be solved (rank deficiency, duplicates)."""


class ConvergenceError(VKrigeError, ArithmeticError):
    """An iterative numerical procedure failed outright."""
