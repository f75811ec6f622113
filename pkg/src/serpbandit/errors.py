"""Shared exception types."""


class SerpBanditError(Exception):
    """Base class for every error raised by this package."""


class ConfigInvalid(SerpBanditError):
    """A configuration value is out of range or inconsistent."""


class DimensionMismatch(SerpBanditError):
    """A vector or matrix has the wrong dimension for the model."""


class MissingTruth(SerpBanditError):
    """An operation needs planted click probabilities that the log lacks."""


class PolicyStateCorruption(SerpBanditError):
    """A policy invariant broke mid-run; the replay aborts with diagnostics."""
