"""Spiking residual networks with densely additive connections."""

__version__ = "0.1.0"
