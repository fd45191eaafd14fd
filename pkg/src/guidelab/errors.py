"""Exception types raised across the package."""


class GuidelabError(Exception):
    """Base class for all package errors."""


class DomainError(GuidelabError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(GuidelabError, ValueError):
    """A configuration is invalid or incompatible with the chosen model."""


class TrainingError(GuidelabError, RuntimeError):
    """Training diverged."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class SamplingError(GuidelabError, RuntimeError):
    """The sampler produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite sampler state at step {step}")
        self.step = step


class CheckpointError(GuidelabError, IOError):
    """A checkpoint file is unreadable, truncated, or incompatible."""
