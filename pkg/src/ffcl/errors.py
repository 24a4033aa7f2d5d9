"""Exception hierarchy shared by every ffcl module."""


class FFCLError(Exception):
    """Base class for all errors raised by ffcl."""


class ShapeError(FFCLError, ValueError):
    """Operand extents do not fit the operation."""


class ValidationError(FFCLError, ValueError):
    """An input value violates an operation's precondition."""


class SpecError(FFCLError, ValueError):
    """A model, dataset or split specification is invalid."""


class ConfigError(FFCLError, ValueError):
    """A pipeline or CLI configuration is invalid."""


class SamplingError(FFCLError, ValueError):
    """Pairs cannot be drawn from the given dataset."""


class TrainingError(FFCLError, RuntimeError):
    """Training hit a non-finite loss or gradient."""


class UndefinedMetricError(FFCLError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""


class CheckpointError(FFCLError):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or malformed metadata."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointDigestError(CheckpointError):
    """Payload checksum does not match."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload."""


class IdxError(FFCLError):
    """Base class for IDX parsing problems."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass
