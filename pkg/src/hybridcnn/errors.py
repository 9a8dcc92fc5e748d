"""Exception hierarchy shared by the whole package.

Configuration and data problems map to CLI exit code 1, numeric and other
runtime failures to exit code 2.
"""


class HybridCnnError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(HybridCnnError):
    """Invalid layer geometry, model config, or CLI arguments."""


class DataError(HybridCnnError):
    """Malformed manifests, unknown labels, or undecodable images."""


class NumericsError(HybridCnnError):
    """NaN/Inf produced by a forward or backward op, or a detached graph."""


class CheckpointError(HybridCnnError):
    """Unreadable, corrupt, or version-mismatched checkpoint files."""
