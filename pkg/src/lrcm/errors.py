"""Shared exception types."""


class LrcmError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(LrcmError):
    """An operation was called with inputs that break its contract."""


class ConfigError(LrcmError):
    """Invalid static configuration (dimensions, ranges, unknown keys)."""


class ParseError(LrcmError):
    """Malformed annotation text.  Carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(LrcmError):
    """A dataset sample violates one of its invariants."""


class MetricError(LrcmError):
    """A metric is undefined for the given inputs."""
