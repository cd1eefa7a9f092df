"""Exception types shared across the package.

Every error raised on a user-facing path derives from LatticeFdrError so
the command line driver can distinguish "your input is bad" (exit 1 with
a structured message) from a genuine crash.
"""


class LatticeFdrError(Exception):
    """Base class for all errors raised by this package."""


class VolumeFormatError(LatticeFdrError):
    """A volume file or its sidecar header is malformed or inconsistent."""


class CheckpointFormatError(LatticeFdrError):
    """A checkpoint archive is missing entries or has an unknown version."""


class DegenerateInputError(LatticeFdrError):
    """Input data violates a statistical precondition (e.g. zero spread)."""


class ProblemTooLargeError(LatticeFdrError):
    """A brute-force oracle was asked for more work than it will accept."""
