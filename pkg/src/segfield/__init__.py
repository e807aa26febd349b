"""Implicit segmentation fields over labeled voxel phantoms.

Subpackages: volume (grids and geometry), phantom (procedural data),
metrics (voxel and structure scores), nn (autodiff and optimizers),
model (encoder / template / point heads), train (loops and inference),
cli (command line entry points).
"""

__version__ = "0.1.0"
