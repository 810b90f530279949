"""Recurrent visual attention over 4D depth-video voxel grids for person identification."""

__version__ = "0.1.0"
