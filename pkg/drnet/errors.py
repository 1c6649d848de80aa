"""Exception types raised by DRNet-Py.

Every exception derives from :class:`DRNetError` and from the builtin that
best describes it, so callers may catch either.
"""


class DRNetError(Exception):
    """Base class of all DRNet-Py errors."""


class InvalidArgument(DRNetError, ValueError):
    """An argument violates an operation's precondition."""


class InvalidState(DRNetError, RuntimeError):
    """An operation was called in a state that does not allow it."""


class InvalidModel(DRNetError, ValueError):
    """A model's parameters or architecture cannot be used as requested."""


class InvalidCalibration(DRNetError, ValueError):
    """Calibration ranges do not cover a tensor that needs quantizing."""


class OptimizerStepRejected(DRNetError, FloatingPointError):
    """A gradient contained non-finite values.

    Args:
        parameter (string): Name of the offending parameter
    """

    def __init__(self, parameter):
        super().__init__(f'Non-finite gradient for parameter {parameter!r}.')
        self.parameter = parameter


class TrainingDiverged(DRNetError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f'Non-finite loss {loss!r} at epoch {epoch}, batch {batch}.')
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class ManifestError(DRNetError, ValueError):
    """A manifest file could not be parsed.

    Args:
        message (string): Description of the problem
        line (int): 1-based line number in the CSV file, if known
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)
        self.line = line


class DuplicatePathError(ManifestError):
    """The same image path appears twice in a manifest."""


class LabelRangeError(ManifestError):
    """A label lies outside the five DR stages."""


class InsufficientPopulation(DRNetError, ValueError):
    """A class has fewer images than a split requests."""

    def __init__(self, label, shortfall):
        super().__init__(f'Class {label} is short of {shortfall} image(s) for the requested split.')
        self.label = label
        self.shortfall = shortfall


class ConfigError(DRNetError, ValueError):
    """A configuration file contains an unknown key or an unparsable value."""


class ContainerError(DRNetError, ValueError):
    """A DRCNN1 container is malformed."""


class FloatOpTrapped(DRNetError, TypeError):
    """A floating-point array reached an integer-only kernel."""
