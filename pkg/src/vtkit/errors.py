"""Exception hierarchy shared across the toolkit."""


class VtkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(VtkitError, ValueError):
    """An array has the wrong shape; the message names the offending dimension."""


class ParameterError(VtkitError, ValueError):
    """A scalar parameter is outside its legal range."""


class StateError(VtkitError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class NonFiniteError(VtkitError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class TrainingDiverged(NonFiniteError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last network whose loss was finite.
    """

    def __init__(self, message, iteration, checkpoint=None, diagnostics=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics or {}


class DatasetError(VtkitError, ValueError):
    """Malformed manifest or dataset that cannot satisfy a request."""


class ImageFormatError(VtkitError, ValueError):
    """Unsupported image file format."""


class TruncatedImageError(ImageFormatError):
    """Image payload is shorter than its header declares."""


class ImageSizeMismatchError(ImageFormatError):
    """Image payload is longer than its header declares."""


class ContainerError(VtkitError, ValueError):
    """Base class for model-file errors."""


class ContainerFormatError(ContainerError):
    """Bad magic bytes or an unparseable structure."""


class ContainerVersionError(ContainerError):
    """The file was written by a newer format version."""


class ContainerTruncatedError(ContainerError):
    """The file ends before its declared structure does."""


class ContainerChecksumError(ContainerError):
    """Whole-file checksum does not match."""
