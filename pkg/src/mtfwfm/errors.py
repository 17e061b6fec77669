"""Exception hierarchy shared by every module."""


class MtfwfmError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(MtfwfmError, ValueError):
    """Instance or tensor shapes disagree with the field schema or model config."""


class ConvTypeError(SchemaError):
    """A conversion-type id is outside ``[0, T)``."""


class EmptyBatchError(MtfwfmError, ValueError):
    pass


class DivergenceError(MtfwfmError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class AucUndefinedError(MtfwfmError, ValueError):
    """AUC requested on a sample set containing a single class."""


class DataError(MtfwfmError, ValueError):
    """Malformed logs, unknown fields, or inconsistent dataset files."""


class SyntheticConfigError(DataError):
    pass


class ExportError(MtfwfmError, OSError):
    pass
