"""Shared exception hierarchy.

The CLI maps ``InputError`` to exit code 2 (bad user-supplied data) and every
other ``StarscoreError`` to exit code 1 (operational failure).
"""


class StarscoreError(Exception):
    """Base class for all starscore errors."""


class InputError(StarscoreError):
    """User-supplied data or arguments failed validation."""


class OperationalError(StarscoreError):
    """Runtime failure: network, credentials, incomplete stores."""
