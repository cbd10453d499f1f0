"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``rdalab.cli``).
"""


class RDAError(Exception):
    exit_code = 1


class ConfigError(RDAError, ValueError):
    """Bad shapes, bad hyper-parameters, malformed config files."""

    exit_code = 2


class UsageError(RDAError, ValueError):
    """A call violated a documented precondition."""

    exit_code = 2


class DegenerateInputError(UsageError):
    """Input cannot be normalized onto the simplex."""


class ProtocolError(RDAError, ValueError):
    """A dataset protocol cannot produce the requested counts."""

    exit_code = 5


class NumericalError(RDAError, ArithmeticError):
    """Non-finite values appeared in a loss, logits or gradients."""

    exit_code = 3

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class VerificationError(RDAError, AssertionError):
    """A property check found a counterexample."""

    exit_code = 4

    def __init__(self, message, counterexample=None):
        super().__init__(message)
        self.counterexample = counterexample
