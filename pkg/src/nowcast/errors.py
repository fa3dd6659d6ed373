"""Exception types shared across the package.

The CLI maps these onto process exit codes, so every raise site picks the
class by who is at fault: a bad configuration value or bad data.
"""


class NowcastError(Exception):
    exit_code = 1


class ConfigurationError(NowcastError, ValueError):
    """An invalid configuration value (grid, model, threshold, optimizer...)."""

    exit_code = 2


class DomainError(NowcastError, ValueError):
    """Input data violates an operation's precondition."""

    exit_code = 3
