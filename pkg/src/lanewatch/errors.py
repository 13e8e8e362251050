"""Exception types shared across the pipeline."""


class LanewatchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LanewatchError, ValueError):
    """Invalid configuration, corridor mismatch, or unknown config key."""


class GeometryError(LanewatchError, ValueError):
    """Degenerate or out-of-domain geometry."""


class ZeroMotionError(GeometryError):
    """A sample and its successor coincide, so the side cannot be decided."""


class StreamOrderError(LanewatchError, ValueError):
    """Records or cell states arrived out of time order."""


class FormatError(LanewatchError, ValueError):
    """A file could not be parsed. The message names the line or field."""
