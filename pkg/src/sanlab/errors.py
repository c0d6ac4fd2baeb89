"""Error types shared across the package."""


class SanlabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SanlabError):
    """An operation received tensors whose dimensions do not fit together."""


class GraphError(SanlabError):
    """A backward pass or optimizer step was requested on an ill-formed graph."""


class RoiError(SanlabError):
    """A region of interest is degenerate for the requested operation."""


class ConfigError(SanlabError):
    """A configuration value violates its documented constraints."""


class CheckpointError(SanlabError):
    """A checkpoint file is missing, truncated, or of an unknown version."""
