"""Weight-anchored actor-critic scheduling of discrete resource blocks."""

__version__ = "0.1.0"
