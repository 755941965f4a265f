"""Self-supervised phoneme boundary detection from raw audio."""

__version__ = "0.1.0"
