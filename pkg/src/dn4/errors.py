"""Exception types shared across the package."""


class DN4Error(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DN4Error):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(DN4Error):
    """An operation was called outside its documented contract."""


class ConfigurationError(DN4Error):
    """A configuration value is missing, unknown, or out of range."""


class IngestionError(DN4Error):
    """A dataset manifest or one of its entries could not be loaded."""


class SamplingError(DN4Error):
    """An episode could not be sampled from the requested class section."""


class FormatError(DN4Error):
    """A file does not conform to its binary or text format."""


class TrainingDiverged(DN4Error):
    """Training produced non-finite values; the last good checkpoint is kept."""
