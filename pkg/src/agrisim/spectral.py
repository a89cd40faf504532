"""Spectral vegetation indices and vegetation extraction.

ExG = 2g - r - b separates canopy from soil in RGB data; NDRE and the
simple ratio are the red-edge indices used for crop nutrition mapping.
"""

from __future__ import annotations

import numpy as np

from .errors import UndefinedIndexError
from .grids import ColoredCloud, GridMap2D

__all__ = [
    "exg",
    "ndre",
    "simple_ratio",
    "vegetation_mask",
    "vegetation_filter",
    "DEFAULT_EXG_THRESHOLD",
]

# separates nominal soil (exg ~ 0) from canopy (exg >= 0.3) with noise margin
DEFAULT_EXG_THRESHOLD = 0.1


def exg(r, g, b):
    """Excess Green index 2g - r - b; accepts scalars or arrays."""
    return 2.0 * np.asarray(g, dtype=float) - np.asarray(r, dtype=float) - np.asarray(b, dtype=float)


def ndre(nir, red_edge):
    """Normalized difference red edge: (nir - red_edge) / (nir + red_edge)."""
    nir = np.asarray(nir, dtype=float)
    red_edge = np.asarray(red_edge, dtype=float)
    den = nir + red_edge
    if np.any(den == 0):
        raise UndefinedIndexError("ndre undefined for nir + red_edge == 0")
    return (nir - red_edge) / den


def simple_ratio(nir, red_edge):
    """Simple ratio nir / red_edge."""
    nir = np.asarray(nir, dtype=float)
    red_edge = np.asarray(red_edge, dtype=float)
    if np.any(red_edge == 0):
        raise UndefinedIndexError("simple ratio undefined for red_edge == 0")
    return nir / red_edge


def vegetation_mask(grid: GridMap2D, threshold: float = DEFAULT_EXG_THRESHOLD) -> np.ndarray:
    """Boolean layer marking exactly the cells with exg > threshold."""
    return grid.layer("exg") > threshold


def vegetation_filter(cloud: ColoredCloud, threshold: float = DEFAULT_EXG_THRESHOLD) -> ColoredCloud:
    """Retain exactly the points with exg > threshold. Idempotent."""
    keep = cloud.exg() > threshold
    return ColoredCloud(cloud.points[keep], cloud.colors[keep], cloud.geo_tag.copy())
