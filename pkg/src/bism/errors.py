"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class SizeError(ValueError):
    """A dimension exceeds the limit for an exact/brute-force code path."""


class DomainError(ValueError):
    """An input value lies outside the mathematical domain of the operation."""


class ContractError(ValueError):
    """A structural precondition was violated (e.g. non-scalar differentiation target)."""


class NumericError(ArithmeticError):
    """A non-finite value was produced; the message names the offending operation."""


class UnsupportedError(ValueError):
    """The requested combination (model kind, divergence, metric) is not defined."""


class ConfigError(ValueError):
    """Configuration failed cross-field validation; the message names the field."""


class ParseError(ValueError):
    """A persisted file is malformed; the message names the location."""


class UsageError(ValueError):
    """Command-level misuse (bad flags, wrong artifact kind for the command)."""


class ResourceError(RuntimeError):
    """A configured memory or node budget would be exceeded."""


class ConvergenceWarning(UserWarning):
    """An iterative refinement did not show the expected loss decrease."""
