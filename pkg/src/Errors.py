# Exception hierarchy shared by every module.
# Argument and shape problems also derive from ValueError so callers that
# only know about ValueError keep working.
from typing import Any, Dict, Optional


class SynthesisError(Exception):
    # Base class for every error raised by this package.
    pass


# --- tensors and layers -----------------------------------------------------

class ShapeMismatch(SynthesisError, ValueError):
    pass


class NumericOverflow(SynthesisError, ArithmeticError):
    pass


class NotScalar(SynthesisError, ValueError):
    pass


class DisconnectedGraph(SynthesisError):
    pass


class InvalidProbability(SynthesisError, ValueError):
    pass


# --- signal pipeline --------------------------------------------------------

class WindowTooLong(SynthesisError, ValueError):
    pass


class AlreadyScaled(SynthesisError, ValueError):
    pass


class InvalidFactor(SynthesisError, ValueError):
    pass


class TooFewPoints(SynthesisError, ValueError):
    pass


class ShiftNotMultiple(SynthesisError, ValueError):
    pass


class RecordingTooShort(SynthesisError, ValueError):
    pass


# --- pairing ----------------------------------------------------------------

class NoNegativesPossible(SynthesisError, ValueError):
    pass


class NotEnoughIndividuals(SynthesisError, ValueError):
    pass


# --- losses -----------------------------------------------------------------

class ThetaOutOfRange(SynthesisError, ValueError):
    pass


class NegativeDistance(SynthesisError, ValueError):
    pass


class DomainError(SynthesisError, ValueError):
    pass


# --- models and training ----------------------------------------------------

class ShapeCompositionError(SynthesisError, ValueError):
    pass


class EmptyDataset(SynthesisError, ValueError):
    pass


class MissingNegatives(SynthesisError, ValueError):
    pass


class KTooLarge(SynthesisError, ValueError):
    pass


class DegenerateEncoding(SynthesisError, ValueError):
    pass


class DegenerateEncodingWarning(UserWarning):
    pass


class UntrainedModel(SynthesisError):
    pass


class NonFiniteLoss(SynthesisError, ArithmeticError):
    # Raised when a training step produces NaN/Inf. `diagnostics` says where.
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


# --- metrics ----------------------------------------------------------------

class ZeroVector(SynthesisError, ValueError):
    pass


class EmptyTestSet(SynthesisError, ValueError):
    pass


# --- hyperparameter search --------------------------------------------------

class AllTrialsFailed(SynthesisError):
    pass


# --- data, config and experiments -------------------------------------------

class InvalidSpec(SynthesisError, ValueError):
    pass


class FormatError(SynthesisError, ValueError):
    def __init__(self, path: str, offset: int, message: str):
        super().__init__(f"{path} (offset {offset}): {message}")
        self.path = path
        self.offset = offset


class ChecksumMismatch(SynthesisError, ValueError):
    pass


class IndexOutOfRange(SynthesisError, IndexError):
    pass


class ConfigError(SynthesisError, ValueError):
    pass


class PipelineError(SynthesisError):
    # Wraps any failure of an experiment stage; the original error is __cause__.
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
