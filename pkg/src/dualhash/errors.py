class DualHashError(Exception):
    pass


class ConfigError(DualHashError, ValueError):
    pass


class ShapeError(DualHashError, ValueError):
    pass


class LabelError(DualHashError, ValueError):
    pass


class QueryError(DualHashError, ValueError):
    pass


class FormatError(DualHashError, ValueError):
    """Raised when a dataset, checkpoint or index file cannot be parsed."""


class ValidationError(DualHashError, ValueError):
    """Raised when parsed content violates a data invariant."""
