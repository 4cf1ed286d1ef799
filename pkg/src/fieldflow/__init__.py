"""Conditional flow-matching operator for heterogeneous 1D/2D/3D PDE trajectories."""

__version__ = "0.1.0"
