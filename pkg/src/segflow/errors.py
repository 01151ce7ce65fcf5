"""Exception hierarchy.

Every error raised on purpose by segflow derives from :class:`SegflowError`,
so callers (the CLI in particular) can map families of failures onto exit codes.
"""


class SegflowError(Exception):
    pass


class DomainError(SegflowError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigurationError(SegflowError, ValueError):
    """Invalid configuration: bad schedule, unusable density/k combination, bad config file."""


class DegenerateDensityError(SegflowError, ArithmeticError):
    """The alpha distribution has (near) zero variance, so both endpoints cannot be identified."""


class UnreliableEstimateError(SegflowError, ArithmeticError):
    pass


class PropagationError(SegflowError, ArithmeticError):
    """A non-finite value appeared while integrating; carries the step context."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class DivergenceError(SegflowError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ContractError(SegflowError, ValueError):
    pass


class PrecisionError(SegflowError, ArithmeticError):
    pass


class CheckpointError(SegflowError, ValueError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
