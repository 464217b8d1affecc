"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all package errors."""


class ConfigurationError(Error):
    """Invalid configuration value or inconsistent setup."""


class DimensionError(Error):
    """Array shapes incompatible with the declared dimensions."""


class DataError(Error):
    """Malformed batch, label, or dataset contents."""


class NumericError(Error):
    """Non-finite value encountered during training."""


class IngestionError(Error):
    """Unreadable or inconsistent input file."""


class PartitionError(Error):
    """A client allocation could not be satisfied."""


class ProtocolError(Error):
    """Client/server exchange used outside its contract."""


class EvaluationError(Error):
    """Evaluation requested on unusable data."""
