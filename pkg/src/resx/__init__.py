"""Residual networks with scaled branches: expansion terms, path ensembles, geometric complexity."""

from resx.model import ModelConfig, ResidualNetParams, forward, init
from resx.tensor import Rng

__all__ = ["ModelConfig", "ResidualNetParams", "Rng", "forward", "init"]
__version__ = "0.1.0"
