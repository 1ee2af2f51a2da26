"""Shared exception types.

DomainError is a value-level outcome: it marks a candidate expression whose
evaluation left the real domain (division by zero, negative base to a
fractional power, ...). Search loops catch it and assign minimal reward; it
must never abort a run.
"""


class HamsrError(Exception):
    """Base class for all package errors."""


class DomainError(HamsrError):
    """Expression evaluation produced a non-finite or undefined value."""


class ShapeMismatchError(HamsrError):
    """Tensor/vector dimensions inconsistent with a network configuration."""


class ConfigError(HamsrError):
    """Structurally invalid configuration."""


class FormatError(HamsrError):
    """A persisted file does not match its schema."""


class FieldError(HamsrError):
    """Gradient-field evaluation failed during integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IncompleteSequenceError(HamsrError):
    """Pre-order token sequence ended before the tree closed."""


class TrailingTokensError(HamsrError):
    """Tokens remain after the pre-order tree closed."""


class UnknownTokenError(HamsrError):
    """Token symbol not present in the active library."""


class SeparabilityError(HamsrError):
    """Expression mixes position and momentum variables in one additive term."""


class TokenInvalidUnderMaskError(HamsrError):
    """Replayed token is masked out: constraints differ from sampling time."""


class EquivalenceSamplingError(HamsrError):
    """Too many equivalence-test sample points failed to evaluate."""


class ExpressionSyntaxError(HamsrError):
    """Infix expression text failed to parse."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position
