"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs or broken invariants (CLI exit
code 1); everything else deriving from ``CxrError`` is a runtime failure (exit 2).
"""


class CxrError(Exception):
    pass


class ValidationError(CxrError):
    pass


# tensor core
class ShapeMismatch(CxrError, ValueError):
    pass


class TokenOutOfRange(CxrError, IndexError):
    pass


class EmptySequence(CxrError, ValueError):
    pass


class NonScalarLoss(CxrError, ValueError):
    pass


# tokenizer / model
class EmptyCorpus(ValidationError):
    pass


class BadImageShape(CxrError, ValueError):
    pass


class ContextOverflow(CxrError, ValueError):
    pass


class CheckpointError(ValidationError):
    pass


# trainer
class FrozenSetViolation(ValidationError):
    pass


class NegativeLambda(ValidationError):
    pass


class EmptyTermWithPositiveAlpha(CxrError, ValueError):
    pass


class NoGradients(CxrError, RuntimeError):
    pass


class MissingSampleKind(ValidationError):
    pass


# corpus synthesis
class ConflictingFindings(ValidationError):
    pass


class ClientFailure(CxrError, RuntimeError):
    def __init__(self, message: str, prompt: str):
        super().__init__(message)
        self.prompt = prompt


class BadProportions(ValidationError):
    pass


class CorpusValidationError(ValidationError):
    pass


# evaluation
class EmbedderMissing(CxrError, ValueError):
    pass


class MissingComponent(CxrError, KeyError):
    pass


class DegenerateLabels(CxrError, ValueError):
    pass


# cli
class UnknownCommand(ValidationError):
    pass


class MissingConfig(ValidationError):
    pass


class MissingArtifact(ValidationError):
    pass


class StageFailure(CxrError, RuntimeError):
    """A training step failed for a reason that is not a validation error."""

    def __init__(self, message: str, stage: int, step: int):
        super().__init__(message)
        self.stage = stage
        self.step = step
