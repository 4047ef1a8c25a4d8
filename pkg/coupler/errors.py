"""
Exception hierarchy.

Every error raised on purpose by the package derives from CouplerError and
carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class CouplerError(Exception):
    """Base class for all package errors."""
    exit_code = 1


class UsageError(CouplerError):
    """Bad flags, bad config keys, bad arguments."""
    exit_code = 1


class ConfigError(UsageError):
    """Malformed config file or unknown key."""


class DataError(CouplerError):
    """Unreadable, malformed or unusable input data."""
    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint file could not be decoded."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared content."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class NumericalError(CouplerError):
    """Non-finite loss, gradient or estimate."""
    exit_code = 3


class ShapeError(CouplerError, ValueError):
    """Array dimensions do not agree."""
    exit_code = 2
