"""Exception hierarchy shared by every layer of the package."""


class CFAError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CFAError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CFAError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NonFiniteError(CFAError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(CFAError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(CFAError, ValueError):
    """Invalid configuration value."""


class TrainingError(CFAError, RuntimeError):
    """Training diverged or otherwise failed."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class FormatError(CFAError, ValueError):
    """A file on disk does not match its expected layout."""


class GenerationError(CFAError, RuntimeError):
    """Synthetic data could not be generated with the requested parameters."""


class LookaheadError(ContractError):
    """Data from a task that has not arrived yet was requested."""
