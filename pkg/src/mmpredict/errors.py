"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration, mask, pattern, or policy is invalid."""


class DataError(ValueError):
    """A sample, label, or token id violates the data contract."""


class StatisticsError(ValueError):
    """A batch is too small for the requested statistic (variance needs n >= 2)."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph, e.g. backward on a non-scalar or twice."""
