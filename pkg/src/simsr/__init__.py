"""Simulation super-resolution: predict high-resolution surface displacements
from coarse volumetric lattice displacements."""

__version__ = "0.1.0"
