"""Feature-space compositional zero-shot training and evaluation engine."""

__version__ = "0.1.0"
