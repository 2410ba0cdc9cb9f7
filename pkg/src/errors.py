"""
Exceptions raised by the ConvNova library.

Every exception carries a short ``code`` used by the command line as a
machine-parsable cause prefix (``Error: <code>: <message>``).
"""


class ConvNovaError(Exception):
    """Base class for all library errors."""

    code = "error"


class ShapeError(ConvNovaError, ValueError):
    """Tensor shapes do not conform to an operation's contract."""

    code = "shape"


class NumericalError(ConvNovaError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""

    code = "numerical"


class ConfigError(ConvNovaError, ValueError):
    """Invalid model, training or command configuration."""

    code = "config"


class DataFormatError(ConvNovaError, ValueError):
    """Malformed FASTA/TSV input or an infeasible synthetic dataset."""

    code = "data"


class CheckpointError(ConvNovaError):
    """Checkpoint file is foreign, truncated or from another format version."""

    code = "checkpoint"


class PreconditionError(ConvNovaError, ValueError):
    """An operation was called outside its documented preconditions."""

    code = "precondition"
