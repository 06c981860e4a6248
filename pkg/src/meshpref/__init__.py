"""Mesh preference rewards trained with a Cauchy-Schwarz divergence term."""

__version__ = "0.1.0"
