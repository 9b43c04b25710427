"""Exception types shared across the pipeline."""


class PrivferError(Exception):
    """Base class for all package errors."""


class DomainError(PrivferError, ValueError):
    """An argument is outside the operation's domain (bad size, shape, sigma...)."""


class ValidationError(PrivferError, ValueError):
    """A record or manifest violates a data-model invariant."""


class ManifestParseError(PrivferError, ValueError):
    """A manifest line could not be parsed.

    ``line_no`` is 1-based.
    """

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CapacityError(PrivferError):
    """Not enough data to satisfy a sampling constraint."""


class ContractError(PrivferError):
    """A model or input violates a calling contract (unfrozen model, wrong variant)."""


class TrainingError(PrivferError, RuntimeError):
    """Optimisation diverged."""


class DependencyError(PrivferError):
    """A pipeline stage is missing an upstream artifact."""

    def __init__(self, stage: str, missing: str, producer: str | None = None):
        msg = f"stage '{stage}' needs {missing}"
        if producer:
            msg += f" (run stage '{producer}' first)"
        super().__init__(msg)
        self.stage = stage
        self.producer = producer


class UsageError(PrivferError, ValueError):
    """Bad command-line or configuration input (unknown stage, unknown key)."""
