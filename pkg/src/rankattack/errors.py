"""Shared exception types."""


class FormatError(Exception):
    """Malformed binary file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(Exception):
    """Invalid experiment configuration (CLI exit code 2)."""
