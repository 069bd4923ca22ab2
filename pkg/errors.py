"""Exception hierarchy shared by every module."""


class GasaError(Exception):
    """Base class for all errors raised by this project."""


class ShapeError(GasaError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(GasaError, ValueError):
    """Input lies outside the domain of an operation (e.g. log of x <= 0)."""


class GradCheckEvaluationError(GasaError):
    """The checked function was not finite at a perturbed point."""


class CameraError(GasaError, ValueError):
    """Camera parameters violate their invariants."""


class ProjectionError(GasaError, ValueError):
    """A point cannot be projected (behind the camera)."""


class KernelInitError(GasaError):
    """The distance kernel did not reach its fitting tolerance."""

    def __init__(self, achieved: float, tolerance: float):
        self.achieved = achieved
        self.tolerance = tolerance
        super().__init__(
            f"Distance kernel fit reached max error {achieved:.4f}, "
            f"tolerance is {tolerance:.4f}"
        )


class QueryParseError(GasaError, ValueError):
    """A text prompt could not be parsed."""


class ResolutionError(GasaError, ValueError):
    """A spatial qualifier or relation could not be resolved."""


class GenerationError(GasaError, ValueError):
    """A scene specification cannot be rendered."""


class PreconditionError(GasaError, ValueError):
    """An operation was called outside its documented preconditions."""


class DatasetError(GasaError):
    """A dataset directory cannot be read."""


class DatasetVersionError(DatasetError):
    """The dataset manifest declares an unsupported format version."""


class TruncatedFileError(DatasetError):
    """A payload file is shorter or longer than its manifest entry says."""


class ChecksumError(DatasetError):
    """A payload file does not match its recorded checksum."""


class CheckpointError(GasaError):
    """A checkpoint file cannot be read."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, unknown version or truncated checkpoint."""


class CheckpointShapeError(CheckpointError):
    """A stored parameter does not match the shape its config implies."""


class TrainingDivergedError(GasaError):
    """A loss term became non-finite during training."""

    def __init__(self, term: str, step: int, checkpoint_path: str = None):
        self.term = term
        self.step = step
        self.checkpoint_path = checkpoint_path
        message = f"Loss term '{term}' became non-finite at step {step}"
        if checkpoint_path:
            message += f"; last good checkpoint: {checkpoint_path}"
        super().__init__(message)


class ConfigError(GasaError, ValueError):
    """A configuration file or value is invalid."""


class UsageError(GasaError):
    """The command line was malformed."""
