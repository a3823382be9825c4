"""Time-varying conditional instrumental variables for effect estimation on panels."""

__version__ = "0.1.0"
