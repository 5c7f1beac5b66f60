"""Audio+text conditioned dance motion generation toolkit."""

__version__ = "0.1.0"
