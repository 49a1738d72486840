"""Pre-train 3D sparse-voxel segmentation networks with pseudo-labels from a 2D scene parser."""

__version__ = "0.1.0"
