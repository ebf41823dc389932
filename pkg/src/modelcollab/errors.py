"""Exception hierarchy shared by every module."""


class CollabError(Exception):
    """Base class for all engine errors."""


class CapabilityError(CollabError):
    """A backend was asked for something it does not declare support for."""


class TransportError(CollabError):
    """A remote backend could not be reached after bounded retries."""


class VocabError(CollabError, ValueError):
    """Token distributions from different vocabularies were combined."""


class ConfigError(CollabError, ValueError):
    """Invalid pool, run, or method configuration."""


class FormatError(CollabError, ValueError):
    """Malformed on-disk data (datasets, tensor containers, scripts)."""


class ShapeError(CollabError, ValueError):
    """Tensor maps with different name/shape sets were combined."""


class ArgumentError(CollabError, ValueError):
    """An operation received arguments outside its domain."""
