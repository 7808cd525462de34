"""Exception types shared across the package."""


class CptrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CptrError, ValueError):
    pass


class RankError(CptrError, ValueError):
    pass


class DomainError(CptrError, ValueError):
    pass


class SpecError(CptrError, ValueError):
    """A task or model configuration that cannot be laid out."""


class TrainingDivergedError(CptrError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(CptrError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass
