"""Exception hierarchy shared by all hm3 modules."""


class Hm3Error(Exception):
    """Base class for every error raised by this package."""


class DomainError(Hm3Error, ValueError):
    """An argument is outside its documented range."""


class ValidationError(Hm3Error, ValueError):
    """A value violates a structural invariant (non-finite tensor, bad shape)."""


class IncompatibilityError(Hm3Error, ValueError):
    """Two tensor containers do not share names/shapes/provenance."""


class ProvenanceError(IncompatibilityError):
    """Deltas and base checkpoints disagree about where they came from."""


class FormatError(Hm3Error):
    """A serialized container cannot be parsed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(Hm3Error, ArithmeticError):
    """An arithmetic result left the finite range."""


class ProtocolError(Hm3Error, RuntimeError):
    """An environment or trainer was driven out of contract (step after done)."""


class TrainingError(Hm3Error, RuntimeError):
    """Optimization diverged; carries the step or iteration index in the message."""


class EvaluationError(Hm3Error, ValueError):
    """A model produced outputs incompatible with the evaluation harness."""


class AssemblyError(Hm3Error, ValueError):
    """An inference path references a layer that does not exist in the zoo."""


class ConfigError(Hm3Error):
    """A run configuration is unusable. CLI maps this to exit code 2."""


class StageError(Hm3Error):
    """A pipeline stage failed. CLI maps this to exit code 3."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
