"""Exception types shared across the package."""


class FsvfmError(Exception):
    """Base class for all package errors."""


class ConfigError(FsvfmError):
    """Invalid configuration value or combination."""


class CodecError(FsvfmError):
    """Malformed parsing-map byte stream. Carries the byte offset at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class IngestionError(FsvfmError):
    """Dataset loading failure. Carries the offending path."""

    def __init__(self, message: str, path):
        super().__init__(f"{message}: {path}")
        self.path = str(path)


class ShapeError(FsvfmError):
    """Tensor or grid dimensions violate a contract."""


class TaxonomyError(FsvfmError):
    """Unknown raw label code in a parsing map."""


class MaskingError(FsvfmError):
    """Mask sampling cannot satisfy its contract on this input."""


class StateError(FsvfmError):
    """Model/branch state inconsistency (missing trace, shape mismatch, ...)."""


class TrainingError(FsvfmError):
    """Training step failed (non-finite loss, ...)."""
