"""Shared exception types."""


class WildlabelError(Exception):
    """Base class for errors the CLI reports as structured JSON."""


class NotReadyError(WildlabelError):
    """An operation was requested before its inputs exist (e.g. resolving
    an image that does not yet have two annotations)."""
