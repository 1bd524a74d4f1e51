"""Exception hierarchy shared by every module."""


class FastDVDError(Exception):
    """Base class for all library errors."""


class ShapeError(FastDVDError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""

    def __init__(self, message, expected=None, actual=None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class WeightsFormatError(FastDVDError):
    """A weights file could not be decoded."""


class BadMagicError(WeightsFormatError):
    pass


class VersionMismatchError(WeightsFormatError):
    pass


class TruncatedFileError(WeightsFormatError):
    pass


class UnknownTensorError(WeightsFormatError):
    pass


class SequenceIOError(FastDVDError):
    """Reading or writing a frame directory failed."""


class ConfigError(FastDVDError, ValueError):
    """Invalid training configuration."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TrainingDivergedError(FastDVDError, ArithmeticError):
    """The loss became NaN or infinite."""

    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
