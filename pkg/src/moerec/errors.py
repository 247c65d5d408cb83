"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code so failures surface with a stable,
scriptable status (see ``moerec.cli``).
"""


class MoerecError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MoerecError):
    """Invalid configuration or usage (bad flag, violated config invariant)."""

    exit_code = 1


class DataError(MoerecError):
    """Malformed dataset input or invalid record content."""

    exit_code = 2


class ShapeError(MoerecError):
    """Tensor dimension mismatch; message reports the offending shapes."""

    exit_code = 3


class NumericError(MoerecError):
    """An operation produced a non-finite value, or a domain violation."""

    exit_code = 3


class TrainingError(MoerecError):
    """Optimization failure (non-finite gradient, missing stage checkpoint)."""

    exit_code = 3


class TapeError(MoerecError):
    """Autodiff contract violation (e.g. backward on a non-scalar node)."""

    exit_code = 3


class TableLookupError(MoerecError):
    """Id lookup beyond an embedding table; never wraps around."""

    exit_code = 2


class ContextLimitError(MoerecError):
    """Token sequence longer than the model's context window."""

    exit_code = 2


class MetricError(MoerecError):
    """Metric precondition violated (empty reference, length mismatch)."""

    exit_code = 2


class VerificationError(MoerecError):
    """A verification suite reported failing checks."""

    exit_code = 4
