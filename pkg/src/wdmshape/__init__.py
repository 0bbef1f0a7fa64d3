"""Probabilistic shaping and many-to-one labelings for coherent WDM links."""

__version__ = "0.1.0"
