"""Exception types shared across the package."""


class CodecAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(CodecAlignError):
    """An array argument has the wrong shape, dtype, or value range."""


class ConfigError(CodecAlignError):
    """A configuration value is out of range or inconsistent.

    The message always names the offending field.
    """


class ConvergenceError(CodecAlignError):
    """Training left its stable region (non-finite loss or KL blowup)."""


class NumericError(CodecAlignError):
    """A forward pass produced NaN/Inf where a finite value is required."""


class FormatError(CodecAlignError):
    """A serialized file is malformed or has the wrong magic/version."""


class ProvenanceError(CodecAlignError):
    """Recorded artifact hashes do not match the artifacts being combined."""


class StatsError(CodecAlignError):
    """Too few data points for the requested statistic."""


class LockError(CodecAlignError):
    """Another live process owns the requested output directory."""
