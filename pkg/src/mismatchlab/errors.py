"""Shared exception types with CLI exit-code mapping."""


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration (exit code 2)."""


class NumericError(RuntimeError):
    """A computation produced non-finite values (exit code 3)."""


class TickCapError(RuntimeError):
    """The simulator exceeded its tick cap without reaching the budget (exit code 4)."""
