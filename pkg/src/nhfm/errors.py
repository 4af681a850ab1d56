"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed, missing, or inconsistent input data."""


class FormatError(DataError):
    """A serialized file does not match its declared format."""


class CheckpointError(Exception):
    """Checkpoint file problems: bad framing, version, or schema mismatch."""


class NumericalError(Exception):
    """NaN/Inf gradients, divergence, or a failed gradient check."""
