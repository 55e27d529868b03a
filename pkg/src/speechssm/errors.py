"""Error taxonomy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES); library code
raises these instead of bare ValueError so callers can tell contract
violations apart from programming errors.
"""


class SpeechSsmError(Exception):
    """Base class for all package errors."""


class ShapeError(SpeechSsmError):
    """Operand shapes violate an operation's precondition."""


class InvalidLengthError(SpeechSsmError):
    """A sequence is too short (or empty) for the requested operation."""


class NumericError(SpeechSsmError):
    """A non-finite value appeared where the contract forbids it."""


class DegenerateDataError(SpeechSsmError):
    """Input data cannot support the computation (e.g. all-identical
    points with k > 1, zero-variance paired differences, empty reference)."""


class InfeasibleAlignmentError(SpeechSsmError):
    """CTC label sequence longer than any alignment the input admits."""


class AnchorError(SpeechSsmError):
    """A score anchor (baseline/SOTA value) is missing or inconsistent."""


class PredictedOomError(SpeechSsmError):
    """Estimated peak memory exceeds the configured byte budget.

    Raised before any large allocation happens; carries the estimate so
    callers can report it.
    """

    def __init__(self, message, estimated_bytes=None, budget_bytes=None):
        super().__init__(message)
        self.estimated_bytes = estimated_bytes
        self.budget_bytes = budget_bytes


class TrainingDivergenceError(SpeechSsmError):
    """Loss scale underflowed its floor; training cannot continue."""


class ConfigError(SpeechSsmError):
    """Invalid or inconsistent configuration."""
