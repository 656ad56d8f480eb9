"""Steered-Gaussian mixture image regression with tile-rasterized training."""
from .core import Head, KernelSet, TileGrid, TileIndex, cov_from_chol, validate_kernel_set
from .geometry import build_tile_index
from .render import render_image, render_point

__version__ = "0.1.0"
