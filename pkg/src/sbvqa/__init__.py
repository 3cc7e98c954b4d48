"""Stack-based no-reference video quality assessment."""

__version__ = "0.1.0"
