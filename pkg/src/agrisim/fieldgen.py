"""Procedural field generation and simulated sensing.

Generates ground-truth fields (crop rows, crops, weeds, terrain), renders
them into sensor-style grid maps, and simulates a delayed, noisy plant
detector. All randomness flows from the spec seed through named substreams,
so identical (spec, seed) gives bit-identical truth, grids, and detections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidSpecError
from .grids import ColoredCloud, GridMap2D

__all__ = [
    "CROP",
    "WEED",
    "GRASS_WEED",
    "TerrainParams",
    "FieldSpec",
    "PlantInstance",
    "Dem",
    "FieldTruth",
    "CameraPath",
    "DetectorParams",
    "DetectionEvent",
    "generate",
    "render_grid",
    "simulate_detections",
    "export_truth_geojson",
    "SOIL_RGB",
    "VEG_RGB",
    "SOIL_NIR_RE",
    "VEG_NIR_RE",
]

CROP = "crop"
WEED = "weed"
GRASS_WEED = "grass_weed"
_SPECIES = (CROP, WEED, GRASS_WEED)

# Nominal reflectances; only the relative ExG contrast matters downstream.
SOIL_RGB = (0.28, 0.24, 0.18)
VEG_RGB = (0.12, 0.42, 0.10)
SOIL_NIR_RE = (0.22, 0.20)
VEG_NIR_RE = (0.55, 0.30)

# rng substream salts
_SUB_LAYOUT = 0
_SUB_RENDER = 1
_SUB_DETECT = 2


@dataclass
class TerrainParams:
    """DEM shape: constant base plus smoothed noise of given amplitude."""

    base_altitude: float = 0.0
    roughness_amplitude: float = 0.0
    correlation_length: float = 2.0
    cell_size: float = 0.25


@dataclass
class FieldSpec:
    """Parameters of a procedurally generated field."""

    extent: tuple[float, float] = (10.0, 10.0)  # east x north, meters
    row_orientation: float = 0.0  # radians
    row_spacing: float = 0.5
    crop_lattice: float = 0.2  # intra-row stem distance
    crop_radius_range: tuple[float, float] = (0.04, 0.06)
    weed_density: float = 0.5  # per m^2
    weed_radius_range: tuple[float, float] = (0.01, 0.05)
    grass_weed_fraction: float = 0.2
    terrain: TerrainParams = field(default_factory=TerrainParams)
    lattice_jitter_sigma: float = 0.01
    jitter_clip_sigmas: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise InvalidSpecError(f"extent must be positive, got {self.extent}")
        if self.row_spacing <= 0:
            raise InvalidSpecError("row_spacing must be positive")
        if self.crop_lattice <= 0:
            raise InvalidSpecError("crop_lattice must be positive")
        if self.weed_density < 0:
            raise InvalidSpecError("weed_density must be non-negative")
        for name in ("crop_radius_range", "weed_radius_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise InvalidSpecError(f"{name} must satisfy 0 < min <= max")
        if not 0.0 <= self.grass_weed_fraction <= 1.0:
            raise InvalidSpecError("grass_weed_fraction must lie in [0, 1]")
        if self.lattice_jitter_sigma < 0:
            raise InvalidSpecError("lattice_jitter_sigma must be non-negative")

    @property
    def jitter_bound(self) -> float:
        return self.lattice_jitter_sigma * self.jitter_clip_sigmas


@dataclass
class PlantInstance:
    id: int
    stem: np.ndarray  # (3,) georeferenced, z on the DEM
    radius: float
    species: str

    def __post_init__(self):
        self.stem = np.asarray(self.stem, dtype=float).reshape(3)
        if self.radius <= 0:
            raise InvalidSpecError("plant radius must be positive")
        if self.species not in _SPECIES:
            raise InvalidSpecError(f"unknown species {self.species!r}")


class Dem:
    """Raster DEM with bilinear interpolation, clamped at the borders."""

    def __init__(self, origin, cell_size: float, altitudes: np.ndarray):
        self.origin = np.asarray(origin, dtype=float).reshape(2)
        self.cell_size = float(cell_size)
        self.altitudes = np.ascontiguousarray(altitudes, dtype=float)
        self.altitudes.flags.writeable = False

    def altitude(self, x, y):
        """Bilinear interpolation of altitude at (x, y); vectorized."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h, w = self.altitudes.shape
        # continuous index of the cell-center lattice
        fx = (x - self.origin[0]) / self.cell_size - 0.5
        fy = (y - self.origin[1]) / self.cell_size - 0.5
        fx = np.clip(fx, 0.0, w - 1.0)
        fy = np.clip(fy, 0.0, h - 1.0)
        x0 = np.clip(np.floor(fx).astype(int), 0, w - 1)
        y0 = np.clip(np.floor(fy).astype(int), 0, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        tx = fx - x0
        ty = fy - y0
        a = self.altitudes
        return (
            a[y0, x0] * (1 - tx) * (1 - ty)
            + a[y0, x1] * tx * (1 - ty)
            + a[y1, x0] * (1 - tx) * ty
            + a[y1, x1] * tx * ty
        )

    def gradient(self, x, y, h: float = 1e-4):
        gx = (self.altitude(x + h, y) - self.altitude(x - h, y)) / (2 * h)
        gy = (self.altitude(x, y + h) - self.altitude(x, y - h)) / (2 * h)
        return gx, gy


@dataclass
class FieldTruth:
    """Ground truth: rows, plants, and terrain for one generated field."""

    spec: FieldSpec
    row_theta: float
    row_offsets: np.ndarray  # signed normal offsets, adjacent gaps == row_spacing
    plants: list[PlantInstance]
    dem: Dem

    def crops(self) -> list[PlantInstance]:
        return [p for p in self.plants if p.species == CROP]

    def weeds(self) -> list[PlantInstance]:
        return [p for p in self.plants if p.species != CROP]

    def stems_xy(self, species=None) -> np.ndarray:
        pts = [p.stem[:2] for p in self.plants if species is None or p.species == species]
        return np.array(pts).reshape(-1, 2)


def row_normal(theta: float) -> np.ndarray:
    return np.array([-math.sin(theta), math.cos(theta)])


def row_tangent(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def _rect_corners(extent) -> np.ndarray:
    ex, ey = extent
    return np.array([[0.0, 0.0], [ex, 0.0], [0.0, ey], [ex, ey]])


def _clip_line_to_rect(point: np.ndarray, tangent: np.ndarray, extent) -> tuple[float, float] | None:
    """Parameter range [umin, umax] of point + u*tangent inside the extent box."""
    lo, hi = -np.inf, np.inf
    for axis in (0, 1):
        p, d = point[axis], tangent[axis]
        if abs(d) < 1e-15:
            if not (0.0 <= p <= extent[axis]):
                return None
            continue
        u0 = (0.0 - p) / d
        u1 = (extent[axis] - p) / d
        lo = max(lo, min(u0, u1))
        hi = min(hi, max(u0, u1))
    if lo >= hi:
        return None
    return lo, hi


def _make_dem(spec: FieldSpec, rng: np.random.Generator) -> Dem:
    t = spec.terrain
    nx = max(2, int(math.ceil(spec.extent[0] / t.cell_size)))
    ny = max(2, int(math.ceil(spec.extent[1] / t.cell_size)))
    if t.roughness_amplitude <= 0:
        alt = np.full((ny, nx), t.base_altitude)
    else:
        noise = rng.standard_normal((ny, nx))
        sigma_cells = max(t.correlation_length / t.cell_size, 1e-6)
        smooth = ndimage.gaussian_filter(noise, sigma=sigma_cells, mode="reflect")
        sd = smooth.std()
        if sd > 0:
            smooth = smooth / sd
        alt = t.base_altitude + t.roughness_amplitude * smooth
    return Dem((0.0, 0.0), t.cell_size, alt)


def generate(spec: FieldSpec) -> FieldTruth:
    """Build the ground-truth field for a spec. Deterministic in (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, _SUB_LAYOUT])
    dem = _make_dem(spec, rng)

    n = row_normal(spec.row_orientation)
    t = row_tangent(spec.row_orientation)
    proj = _rect_corners(spec.extent) @ n
    pmin, pmax = float(proj.min()), float(proj.max())
    first = pmin + spec.row_spacing / 2.0
    count = int(math.floor((pmax - first) / spec.row_spacing)) + 1
    if count < 1:
        count = 1
    offsets = first + spec.row_spacing * np.arange(count)

    plants: list[PlantInstance] = []
    clip = spec.jitter_bound
    for off in offsets:
        anchor = off * n
        span = _clip_line_to_rect(anchor, t, spec.extent)
        if span is None:
            continue
        umin, umax = span
        phase = rng.uniform(0.0, spec.crop_lattice)
        u0 = umin + phase
        m = int(math.floor((umax - u0) / spec.crop_lattice)) + 1
        if m < 1:
            continue
        us = u0 + spec.crop_lattice * np.arange(m)
        if spec.lattice_jitter_sigma > 0:
            du = np.clip(rng.normal(0.0, spec.lattice_jitter_sigma, m), -clip, clip)
            dv = np.clip(rng.normal(0.0, spec.lattice_jitter_sigma, m), -clip, clip)
        else:
            du = dv = np.zeros(m)
        radii = rng.uniform(*spec.crop_radius_range, m)
        for k in range(m):
            xy = anchor + (us[k] + du[k]) * t + dv[k] * n
            if not (0 <= xy[0] <= spec.extent[0] and 0 <= xy[1] <= spec.extent[1]):
                continue
            z = float(dem.altitude(xy[0], xy[1]))
            plants.append(PlantInstance(len(plants), (xy[0], xy[1], z), float(radii[k]), CROP))

    area = spec.extent[0] * spec.extent[1]
    n_weeds = int(rng.poisson(spec.weed_density * area))
    if n_weeds > 0:
        pos = rng.uniform((0.0, 0.0), spec.extent, (n_weeds, 2))
        radii = rng.uniform(*spec.weed_radius_range, n_weeds)
        grassy = rng.uniform(0.0, 1.0, n_weeds) < spec.grass_weed_fraction
        for k in range(n_weeds):
            z = float(dem.altitude(pos[k, 0], pos[k, 1]))
            species = GRASS_WEED if grassy[k] else WEED
            plants.append(
                PlantInstance(len(plants), (pos[k, 0], pos[k, 1], z), float(radii[k]), species)
            )

    return FieldTruth(spec, spec.row_orientation, offsets, plants, dem)


def render_grid(
    truth: FieldTruth,
    cell_size: float,
    bands: tuple[str, ...] = ("r", "g", "b", "height"),
    canopy_height: float = 0.15,
    noise_sigma: float = 0.03,
    seed: int | None = None,
) -> GridMap2D:
    """Rasterize truth into a sensor-style grid map.

    Cells whose center lies under a plant canopy disc get vegetation
    reflectance, all others soil reflectance; per-cell multiplicative noise
    (clipped at 3 sigma) models sensor variation. The height layer is
    DEM altitude plus canopy height over vegetation.
    """
    if cell_size <= 0:
        raise InvalidSpecError("cell_size must be positive")
    spec = truth.spec
    w = max(1, int(math.ceil(spec.extent[0] / cell_size)))
    h = max(1, int(math.ceil(spec.extent[1] / cell_size)))
    rng = np.random.default_rng([spec.seed, _SUB_RENDER] if seed is None else [seed])

    veg = np.zeros((h, w), dtype=bool)
    for p in truth.plants:
        cx, cy, r = p.stem[0], p.stem[1], p.radius
        c0 = max(0, int(math.floor((cx - r) / cell_size)))
        c1 = min(w - 1, int(math.floor((cx + r) / cell_size)))
        r0 = max(0, int(math.floor((cy - r) / cell_size)))
        r1 = min(h - 1, int(math.floor((cy + r) / cell_size)))
        if c1 < c0 or r1 < r0:
            continue
        xs = (np.arange(c0, c1 + 1) + 0.5) * cell_size - cx
        ys = (np.arange(r0, r1 + 1) + 0.5) * cell_size - cy
        inside = xs[None, :] ** 2 + ys[:, None] ** 2 <= r * r
        veg[r0 : r1 + 1, c0 : c1 + 1] |= inside

    def noisy(base_soil, base_veg):
        vals = np.where(veg, base_veg, base_soil)
        mult = 1.0 + np.clip(rng.normal(0.0, noise_sigma, (h, w)), -3 * noise_sigma, 3 * noise_sigma)
        return np.clip(vals * mult, 0.0, 1.0)

    layers: dict[str, np.ndarray] = {}
    for i, band in enumerate(("r", "g", "b")):
        if band in bands:
            layers[band] = noisy(SOIL_RGB[i], VEG_RGB[i])
    if "nir" in bands:
        layers["nir"] = noisy(SOIL_NIR_RE[0], VEG_NIR_RE[0])
    if "red_edge" in bands:
        layers["red_edge"] = noisy(SOIL_NIR_RE[1], VEG_NIR_RE[1])
    if "height" in bands:
        centers_x = (np.arange(w) + 0.5) * cell_size
        centers_y = (np.arange(h) + 0.5) * cell_size
        gx, gy = np.meshgrid(centers_x, centers_y)
        ground = truth.dem.altitude(gx, gy)
        layers["height"] = ground + np.where(veg, canopy_height, 0.0)

    return GridMap2D((0.0, 0.0), cell_size, layers)


@dataclass
class CameraPath:
    """Piecewise-linear ground track traversed at constant speed."""

    waypoints: np.ndarray  # (K, 2)
    speed: float = 0.5
    start_time: float = 0.0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        if len(self.waypoints) < 2:
            raise InvalidSpecError("camera path needs at least two waypoints")
        if self.speed <= 0:
            raise InvalidSpecError("camera speed must be positive")


@dataclass
class DetectorParams:
    footprint_radius: float = 0.5
    confusion: float = 0.0  # probability the emitted label is wrong
    delay_kind: str = "constant"  # constant | uniform | exponential
    delay_params: tuple[float, ...] = (0.0,)
    position_sigma: float = 0.01
    radius_sigma: float = 0.002
    obs_period: float = 0.5  # re-observation interval while inside footprint
    confidence_range: tuple[float, float] = (0.6, 0.95)
    seed: int | None = None


@dataclass
class DetectionEvent:
    plant_id: int
    measured_position: np.ndarray  # (2,)
    position_sigma: float
    measured_radius: float
    raw_label: str
    label_confidence: float
    timestamp: float
    delivery_delay: float

    def __post_init__(self):
        self.measured_position = np.asarray(self.measured_position, dtype=float).reshape(2)
        if self.delivery_delay < 0:
            raise InvalidSpecError("delivery_delay must be non-negative")
        if not (0.0 < self.label_confidence < 1.0):
            raise InvalidSpecError("label_confidence must lie in (0, 1)")


def _draw_delay(params: DetectorParams, rng: np.random.Generator) -> float:
    kind, p = params.delay_kind, params.delay_params
    if kind == "constant":
        return float(p[0])
    if kind == "uniform":
        return float(rng.uniform(p[0], p[1]))
    if kind == "exponential":
        return float(rng.exponential(p[0]))
    raise InvalidSpecError(f"unknown delay kind {kind!r}")


def _footprint_intervals(stem_xy, path: CameraPath, radius: float) -> list[tuple[float, float]]:
    """Time intervals during which the stem lies inside the moving footprint."""
    intervals = []
    t_seg = path.start_time
    for a, b in zip(path.waypoints[:-1], path.waypoints[1:]):
        seg = b - a
        length = float(np.hypot(*seg))
        if length == 0:
            continue
        dur = length / path.speed
        v = seg / length * path.speed
        rel = a - stem_xy
        # |rel + v t| = radius
        aa = float(v @ v)
        bb = 2.0 * float(rel @ v)
        cc = float(rel @ rel) - radius * radius
        disc = bb * bb - 4 * aa * cc
        if disc > 0:
            rt = math.sqrt(disc)
            t0 = (-bb - rt) / (2 * aa)
            t1 = (-bb + rt) / (2 * aa)
            lo, hi = max(t0, 0.0), min(t1, dur)
            if lo < hi:
                intervals.append((t_seg + lo, t_seg + hi))
        t_seg += dur
    # merge touching intervals across segment boundaries
    merged: list[tuple[float, float]] = []
    for lo, hi in intervals:
        if merged and lo <= merged[-1][1] + 1e-12:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def simulate_detections(
    truth: FieldTruth, camera_path: CameraPath, params: DetectorParams
) -> list[DetectionEvent]:
    """Emit detection events for every plant crossed by the camera footprint.

    One event fires when the footprint first reaches a plant, then every
    obs_period while the plant stays inside. Labels flip with the configured
    confusion probability; delivery delays follow the configured
    distribution. Deterministic under seed.
    """
    seed = params.seed if params.seed is not None else None
    rng = np.random.default_rng(
        [truth.spec.seed, _SUB_DETECT] if seed is None else [seed]
    )
    events: list[DetectionEvent] = []
    for p in truth.plants:
        for lo, hi in _footprint_intervals(p.stem[:2], camera_path, params.footprint_radius):
            n_obs = 1 + int(math.floor((hi - lo) / params.obs_period)) if params.obs_period > 0 else 1
            for k in range(n_obs):
                ts = lo + k * params.obs_period
                if ts > hi:
                    break
                pos = p.stem[:2] + rng.normal(0.0, params.position_sigma, 2)
                radius = max(1e-4, p.radius + rng.normal(0.0, params.radius_sigma))
                label = p.species
                if params.confusion > 0 and rng.uniform() < params.confusion:
                    others = [s for s in _SPECIES if s != p.species]
                    label = others[int(rng.integers(len(others)))]
                conf = float(rng.uniform(*params.confidence_range))
                delay = _draw_delay(params, rng)
                events.append(
                    DetectionEvent(
                        plant_id=p.id,
                        measured_position=pos,
                        position_sigma=params.position_sigma,
                        measured_radius=radius,
                        raw_label=label,
                        label_confidence=conf,
                        timestamp=ts,
                        delivery_delay=delay,
                    )
                )
    events.sort(key=lambda e: (e.timestamp, e.plant_id))
    return events


def cloud_from_render(grid: GridMap2D) -> ColoredCloud:
    """One colored 3-D point per rendered cell (center xy, height as z)."""
    for band in ("r", "g", "b", "height"):
        if band not in grid.layer_names:
            raise InvalidSpecError(f"render lacks the {band!r} band")
    cc = grid.cell_centers()
    z = grid.layer("height")
    pts = np.dstack([cc, z[..., None]]).reshape(-1, 3)
    cols = np.dstack([grid.layer(b)[..., None] for b in ("r", "g", "b")])
    return ColoredCloud(pts, np.clip(cols.reshape(-1, 3), 0.0, 1.0))


def export_truth_geojson(truth: FieldTruth, path) -> None:
    """Write rows (LineString) and plants (Point) as a GeoJSON-style file."""
    features = []
    t = row_tangent(truth.row_theta)
    n = row_normal(truth.row_theta)
    for i, off in enumerate(truth.row_offsets):
        anchor = off * n
        span = _clip_line_to_rect(anchor, t, truth.spec.extent)
        if span is None:
            continue
        p0 = anchor + span[0] * t
        p1 = anchor + span[1] * t
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[float(p0[0]), float(p0[1])], [float(p1[0]), float(p1[1])]],
                },
                "properties": {"kind": "row", "index": i, "offset": float(off)},
            }
        )
    for p in truth.plants:
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(c) for c in p.stem]},
                "properties": {"kind": "plant", "id": p.id, "species": p.species, "radius": p.radius},
            }
        )
    doc = {
        "type": "FeatureCollection",
        "properties": {"row_theta": truth.row_theta, "spec": _spec_dict(truth.spec)},
        "features": features,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _spec_dict(spec: FieldSpec) -> dict:
    d = asdict(spec)
    d["extent"] = list(d["extent"])
    d["crop_radius_range"] = list(d["crop_radius_range"])
    d["weed_radius_range"] = list(d["weed_radius_range"])
    return d
