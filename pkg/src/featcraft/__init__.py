"""Feature crafting against model inversion, with the attacks and metrics used to evaluate it."""

__version__ = "0.1.0"
