"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class BarlowTupleError(Exception):
    """Base class for all package errors."""


class DimensionError(BarlowTupleError, ValueError):
    """Shapes of operands are incompatible."""


class BatchSizeError(BarlowTupleError, ValueError):
    """Batch too small for a batch statistic (needs B >= 2)."""


class ContractError(BarlowTupleError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(BarlowTupleError, ArithmeticError):
    """NaN/Inf or a degenerate quantity (zero norm, zero std) was produced."""


class LabelError(BarlowTupleError, ValueError):
    """Class label outside the valid range."""


class UndefinedMetricError(BarlowTupleError, ArithmeticError):
    """Metric has no defined value (e.g. every class union is empty)."""


class ConfigError(BarlowTupleError, ValueError):
    """Experiment configuration is inconsistent."""


class DataError(BarlowTupleError, ValueError):
    """Dataset on disk is missing pieces or is malformed."""
