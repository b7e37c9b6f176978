"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by pipeline_attest."""


class ZeroInverse(PipelineError, ZeroDivisionError):
    pass


class OutOfRange(PipelineError, ValueError):
    pass


class Overflow(PipelineError, ArithmeticError):
    pass


class DimensionMismatch(PipelineError, ValueError):
    pass


class EmptyLeafSet(PipelineError, ValueError):
    pass


class IndexOutOfRange(PipelineError, IndexError):
    pass


class TargetPresent(PipelineError, ValueError):
    pass


class TooManyIndices(PipelineError, ValueError):
    pass


class DecodeError(PipelineError, ValueError):
    """Malformed canonical binary or JSON input."""


class EmptyAcceptedSet(PipelineError, ValueError):
    pass


class SchemaMismatch(PipelineError, ValueError):
    pass


class EmptyOutput(PipelineError, ValueError):
    pass


class ChallengeCountExceedsRows(PipelineError, ValueError):
    pass


class InvalidPriorOpening(PipelineError, ValueError):
    pass


class RecordNotFound(PipelineError, KeyError):
    pass


class GroupColumnOutOfRange(PipelineError, IndexError):
    pass


class UnlinkedInput(PipelineError, ValueError):
    def __init__(self, label: str, digest_hex: str = ""):
        super().__init__(f"input {label!r} ({digest_hex}) not emitted by any earlier stage")
        self.label = label


class NonContiguousIndex(PipelineError, ValueError):
    pass


class MissingProofBlob(PipelineError, FileNotFoundError):
    pass


class UnknownLabel(PipelineError, KeyError):
    pass


class ConfigInvalid(PipelineError, ValueError):
    pass


class MissingPrerequisiteStage(PipelineError, RuntimeError):
    pass


class ExistingStage(PipelineError, RuntimeError):
    pass
