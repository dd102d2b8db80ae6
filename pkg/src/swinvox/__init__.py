"""Single-view voxel reconstruction with a shifted-window attention encoder."""

__version__ = "0.1.0"
