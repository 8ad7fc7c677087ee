"""Shared exception types. CLI maps these onto process exit codes."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """API misuse: non-scalar backward, consumed tape, shape drift."""


class NonFiniteError(ArithmeticError):
    """A forward op or loss produced NaN/Inf."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class ManifestError(ValueError):
    """Malformed manifest line or unknown class code."""
