"""Exception types shared across the package.

Exit-code mapping for the CLI lives in cli.py: usage/config errors map to 1,
numeric failures to 2, verification failures to 3.
"""


class ContractError(ValueError):
    """A caller violated a documented precondition (shapes, token ids, modes)."""


class NumericDomainError(ArithmeticError):
    """A numeric primitive received or produced a non-finite / out-of-domain value."""


class CapacityError(RuntimeError):
    """An enumeration request exceeds the configured sequence-count cap."""

    def __init__(self, count, cap):
        super().__init__(f"output space holds {count} sequences, cap is {cap}")
        self.count = count
        self.cap = cap


class DataError(RuntimeError):
    """Required stored data (samples, corpus entries) is missing or inconsistent."""


class ParseError(ValueError):
    """A corpus/checkpoint/config file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """A run configuration failed validation; message names the field."""


class VerificationInvalidError(RuntimeError):
    """A verification run cannot be trusted (e.g. non-deterministic objective)."""


class NonFiniteGradientError(ArithmeticError):
    """A parameter update was rejected because the gradient is not finite."""
