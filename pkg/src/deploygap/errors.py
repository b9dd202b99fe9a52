"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class DeployGapError(Exception):
    exit_code = 1


class DataError(DeployGapError):
    exit_code = 2


class MalformedManifest(DataError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        prefix = f"record {index}: " if index is not None else ""
        super().__init__(prefix + message)


class MissingImage(DataError):
    pass


class DecodeError(DataError):
    pass


class ShapeMismatch(DeployGapError, ValueError):
    pass


class DegenerateScale(DeployGapError, ValueError):
    pass


class BadQuality(DeployGapError, ValueError):
    pass


class DegenerateBand(DeployGapError, ValueError):
    pass


class TrainingError(DeployGapError):
    exit_code = 3


class InsufficientData(TrainingError):
    pass


class AlignmentError(TrainingError):
    pass


class NonConvergence(TrainingError):
    """Final train accuracy fell below the convergence floor.

    The trained checkpoint is still attached so callers can inspect or keep it.
    """

    def __init__(self, message: str, loss_trace=None, accuracy=None, checkpoint=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace or [])
        self.accuracy = accuracy
        self.checkpoint = checkpoint


class ArtifactError(DeployGapError):
    exit_code = 4


class MalformedArtifact(ArtifactError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NonDifferentiableDetector(ArtifactError, TypeError):
    pass


class EvaluationError(DeployGapError):
    exit_code = 5


class MissingArtifact(EvaluationError):
    pass


class ReportError(DeployGapError):
    exit_code = 6


class SingleClass(DeployGapError, ValueError):
    pass


class NonConvergentResampling(DeployGapError, RuntimeError):
    pass
