"""Mean-field control under a sublinear (G-)expectation on a volatility scenario tree."""

__version__ = "0.1.0"
