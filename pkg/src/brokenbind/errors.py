"""Shared error types mapped to CLI exit codes (see cli.main)."""


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration (exit code 2)."""


class DataError(Exception):
    """Bad dataset content, layout, or on-disk artifact (exit code 3)."""
