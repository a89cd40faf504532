"""Georeferenced multi-layer raster maps and colored point clouds.

GridMap2D is the shared currency of perception, registration, and planning:
named float layers over a regular grid, with spectral index layers computed
lazily and cached. ColoredCloud is the 3-D counterpart used by the
aerial-ground registration pipeline.

File formats: one 16-bit binary PGM per layer plus a text sidecar header
(origin, cell size, band name, value range), and ASCII PLY with
``x y z r g b`` for clouds.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UndefinedIndexError

__all__ = [
    "GridMap2D",
    "ColoredCloud",
    "write_layer_pgm",
    "read_layer_pgm",
    "write_ply",
    "read_ply",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


class GridMap2D:
    """Multi-layer raster with a georeferenced origin.

    Layers are (height, width) float arrays sharing one geometry. Cell
    (row, col) covers [origin + (col, row)*cell_size, +cell_size) and its
    center is origin + (col + 0.5, row + 0.5)*cell_size.

    Instances are immutable after construction: layer arrays are read-only
    and computed index layers (exg, ndre, sr) follow an initialize-once
    rule, so concurrent readers are safe.
    """

    _COMPUTED = ("exg", "ndre", "sr")

    def __init__(self, origin, cell_size: float, layers: dict[str, np.ndarray]):
        if cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {cell_size}")
        if not layers:
            raise ValueError("at least one layer is required")
        self.origin = np.asarray(origin, dtype=float).reshape(2).copy()
        self.origin.flags.writeable = False
        self.cell_size = float(cell_size)
        self._layers: dict[str, np.ndarray] = {}
        shape = None
        for name, arr in layers.items():
            arr = _freeze(arr)
            if arr.ndim != 2:
                raise ValueError(f"layer {name!r} must be 2-D")
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"layer {name!r} shape {arr.shape} != {shape}")
            self._layers[name] = arr
        self.height, self.width = shape

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(self._layers)

    def has_layer(self, name: str) -> bool:
        return name in self._layers or name in self._COMPUTED

    def layer(self, name: str) -> np.ndarray:
        """Return a layer, computing and caching spectral indices on demand."""
        if name in self._layers:
            return self._layers[name]
        if name == "exg":
            arr = 2.0 * self._layers["g"] - self._layers["r"] - self._layers["b"]
        elif name == "ndre":
            nir, re_ = self._layers["nir"], self._layers["red_edge"]
            den = nir + re_
            if np.any(den == 0):
                raise UndefinedIndexError("ndre undefined where nir + red_edge == 0")
            arr = (nir - re_) / den
        elif name == "sr":
            nir, re_ = self._layers["nir"], self._layers["red_edge"]
            if np.any(re_ == 0):
                raise UndefinedIndexError("simple ratio undefined where red_edge == 0")
            arr = nir / re_
        else:
            raise KeyError(f"unknown layer {name!r}")
        # initialize-once: first computation wins, later calls see the cache
        self._layers[name] = _freeze(arr)
        return self._layers[name]

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-center coordinates in meters."""
        cols = self.origin[0] + (np.arange(self.width) + 0.5) * self.cell_size
        rows = self.origin[1] + (np.arange(self.height) + 0.5) * self.cell_size
        cx, cy = np.meshgrid(cols, rows)
        return np.stack([cx, cy], axis=-1)

    def cell_index(self, xy) -> tuple[np.ndarray, np.ndarray]:
        """Map points (N, 2) to (row, col) indices; may fall outside the grid."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        col = np.floor((xy[:, 0] - self.origin[0]) / self.cell_size).astype(int)
        row = np.floor((xy[:, 1] - self.origin[1]) / self.cell_size).astype(int)
        return row, col

    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in meters."""
        return (
            float(self.origin[0]),
            float(self.origin[1]),
            float(self.origin[0] + self.width * self.cell_size),
            float(self.origin[1] + self.height * self.cell_size),
        )


@dataclass
class ColoredCloud:
    """Georeferenced colored point set: points (N, 3) m, colors (N, 3) in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray
    geo_tag: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        self.geo_tag = np.asarray(self.geo_tag, dtype=float).reshape(3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if len(self.colors) and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)

    def exg(self) -> np.ndarray:
        r, g, b = self.colors[:, 0], self.colors[:, 1], self.colors[:, 2]
        return 2.0 * g - r - b

    def transformed(self, fn) -> "ColoredCloud":
        """Apply a point-wise map (N,3)->(N,3), keeping colors and geo_tag."""
        return ColoredCloud(fn(self.points), self.colors.copy(), self.geo_tag.copy())


# ---------------------------------------------------------------------------
# PGM layer I/O (binary P5, 16-bit, plus text sidecar with geometry + range)

def write_layer_pgm(grid: GridMap2D, name: str, path) -> None:
    """Write one layer as 16-bit PGM and a sidecar ``<path>.hdr`` text file."""
    path = Path(path)
    arr = grid.layer(name)
    vmin = float(arr.min())
    vmax = float(arr.max())
    span = vmax - vmin
    if span == 0:
        q = np.zeros_like(arr, dtype=np.uint16)
    else:
        q = np.round((arr - vmin) / span * 65535.0).astype(np.uint16)
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.width} {grid.height}\n65535\n".encode("ascii"))
        f.write(q.astype(">u2").tobytes())
    hdr = (
        f"band: {name}\n"
        f"origin: {float(grid.origin[0])!r} {float(grid.origin[1])!r}\n"
        f"cell_size: {float(grid.cell_size)!r}\n"
        f"vmin: {vmin!r}\n"
        f"vmax: {vmax!r}\n"
    )
    Path(str(path) + ".hdr").write_text(hdr)


def read_layer_pgm(path) -> tuple[str, GridMap2D]:
    """Read a layer written by :func:`write_layer_pgm`. Returns (band, grid)."""
    path = Path(path)
    raw = path.read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 65535:
        raise ValueError("expected 16-bit PGM")
    data = np.frombuffer(raw[m.end():], dtype=">u2", count=w * h).reshape(h, w)
    hdr = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        key, _, val = line.partition(":")
        hdr[key.strip()] = val.strip()
    band = hdr["band"]
    ox, oy = (float(v) for v in hdr["origin"].split())
    vmin, vmax = float(hdr["vmin"]), float(hdr["vmax"])
    arr = vmin + data.astype(float) / 65535.0 * (vmax - vmin)
    grid = GridMap2D((ox, oy), float(hdr["cell_size"]), {band: arr})
    return band, grid


# ---------------------------------------------------------------------------
# ASCII PLY cloud I/O

def write_ply(cloud: ColoredCloud, path) -> None:
    path = Path(path)
    tag = [float(v) for v in cloud.geo_tag]
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment geo_tag {tag[0]!r} {tag[1]!r} {tag[2]!r}",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property float r",
        "property float g",
        "property float b",
        "end_header",
    ]
    body = [
        f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]!r} {c[1]!r} {c[2]!r}"
        for p, c in zip(cloud.points.tolist(), cloud.colors.tolist())
    ]
    path.write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> ColoredCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path} is not a PLY file")
    geo_tag = np.zeros(3)
    n = 0
    i = 0
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["comment", "geo_tag"]:
            geo_tag = np.array([float(v) for v in tok[2:5]])
        elif tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok[:1] == ["end_header"]:
            break
    vals = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1 : i + 1 + n]])
    if n == 0:
        return ColoredCloud(np.zeros((0, 3)), np.zeros((0, 3)), geo_tag)
    return ColoredCloud(vals[:, :3], vals[:, 3:6], geo_tag)
