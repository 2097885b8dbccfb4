"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class UnetformerError(Exception):
    """Base class for all package errors."""


class UsageError(UnetformerError):
    """Bad command-line invocation."""


class ConfigError(UnetformerError):
    """Invalid or unknown configuration key/value."""


class ShapeError(UnetformerError):
    """Tensor shape, dtype, or argument mismatch."""


class NumericError(UnetformerError):
    """A computation produced NaN/Inf or was otherwise numerically invalid."""


class DataError(UnetformerError):
    """Malformed dataset, image file, or label map."""


class CheckpointError(DataError):
    """Malformed or incompatible checkpoint file."""


class GraphError(UnetformerError):
    """Misuse of the autodiff graph (e.g. backward with nothing recorded)."""
