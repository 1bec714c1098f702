"""RF-guided mechanical search on a synthetic voxel world."""

__version__ = "0.1.0"
