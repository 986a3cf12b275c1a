"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration and format problems exit
with 2, numeric failures with 3.
"""


class SphereMoeError(Exception):
    """Base class for all package errors."""


class ConfigError(SphereMoeError, ValueError):
    """Invalid configuration, out-of-range setting or inconsistent inputs."""


class FormatError(SphereMoeError, ValueError):
    """Malformed file contents (ROI JSON, dataset binaries, checkpoints)."""


class ShapeError(SphereMoeError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class RangeError(SphereMoeError, IndexError):
    """An index lies outside the valid range."""


class DegenerateInputError(SphereMoeError, ValueError):
    """Input is structurally valid but carries no usable data (e.g. empty ROI)."""


class NumericError(SphereMoeError, ArithmeticError):
    """NaN or Inf encountered."""


class ContractError(SphereMoeError, ValueError):
    """A documented precondition of an operation was violated."""
