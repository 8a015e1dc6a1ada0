"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when an operation receives arrays of incompatible shape."""


class ConfigError(ValueError):
    """Raised for unknown config keys, invalid values, or checkpoint/data mismatches."""


class CsvFormatError(ValueError):
    """Raised when a CSV data file violates the documented schema."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file is truncated or has the wrong magic."""


def check_dims(op: str, ok: bool, detail: str):
    if not ok:
        raise DimensionError(f"{op}: {detail}")
