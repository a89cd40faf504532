"""Canned simulation scenarios shared by tests, scripts, and the CLI.

Each builder returns a fully deterministic scenario object: ground-truth
trajectory, measurement constraints, and the (possibly drifting) initial
guesses a localizer would start from. Randomness is confined to
``np.random.default_rng([seed, salt])`` substreams so scenarios are
reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import posegraph as pg
from .fieldgen import (
    Dem,
    FieldSpec,
    TerrainParams,
    cloud_from_render,
    generate,
    render_grid,
)
from .grids import ColoredCloud
from .registration import AffineTransform3D
from .temporal import Similarity2D

# rng substream salts
_SALT_DEM = 99
_SALT_NOISE = 78

# default sensor information weights (1/sigma^2)
GPS_SIGMA_XY = 0.1
GPS_SIGMA_Z = 0.3
ODOM_SIGMA_T = 0.05
ODOM_SIGMA_R = math.radians(1.0)
IMU_SIGMA = math.radians(0.2)
DEM_SIGMA = pg.DEFAULT_DEM_SIGMA
# nodes sit 1.2 m apart on rolling ground (z steps up to ~0.15 m), so the
# smoothness weight is looser here than the module default
SMOOTH_SIGMA = 0.1


@dataclass
class LocalizationScenario:
    """A ground vehicle run: truth, initial guesses, per-node constraints."""

    dem: Dem
    truth_t: np.ndarray          # (n, 3) positions
    truth_q: np.ndarray          # (n, 4) orientations, xyzw
    init_t: np.ndarray           # (n, 3) dead-reckoned initialization
    init_q: np.ndarray
    constraints: list = field(default_factory=list)  # per-node constraint lists
    gps: np.ndarray | None = None                    # raw GPS fixes used in priors

    @property
    def n(self) -> int:
        return self.truth_t.shape[0]

    def node(self, k: int) -> pg.PoseNode:
        return pg.PoseNode(k, float(k), self.init_t[k].copy(), self.init_q[k].copy())


def _serpentine(n: int, start=(5.0, 5.0), step=1.2, leg=40):
    """Boustrophedon waypoints: straight legs joined by 90 degree turns."""
    pts, heads = [], []
    x, y = start
    h = 0.0
    for k in range(n):
        pts.append((x, y))
        heads.append(h)
        x += step * math.cos(h)
        y += step * math.sin(h)
        if k % leg == leg - 1:
            h += math.pi / 2
    return pts, heads


def rolling_dem(seed: int, shape=(60, 60), cell=2.0, relief=0.8, base=2.0) -> Dem:
    """Smooth random terrain with the given vertical relief (std in meters)."""
    rng = np.random.default_rng([seed, _SALT_DEM])
    z = gaussian_filter(rng.normal(0.0, 1.0, shape), 4.0)
    return Dem((0.0, 0.0), cell, z / z.std() * relief + base)


def flat_dem(altitude=2.0, shape=(60, 60), cell=2.0) -> Dem:
    return Dem((0.0, 0.0), cell, np.full(shape, float(altitude)))


def _truth_path(dem: Dem, n: int):
    pts, heads = _serpentine(n)
    truth_t = np.array([[x, y, dem.altitude(x, y)] for x, y in pts])
    truth_q = np.array([pg.rotvec_to_quat(np.array([0.0, 0.0, h])) for h in heads])
    return truth_t, truth_q


def _default_infos():
    info_m = np.diag([1.0 / ODOM_SIGMA_T**2] * 3 + [1.0 / ODOM_SIGMA_R**2] * 3)
    info_g = np.diag([1.0 / GPS_SIGMA_XY**2] * 2 + [1.0 / GPS_SIGMA_Z**2])
    info_i = np.diag([1.0 / IMU_SIGMA**2] * 2)
    return info_m, info_g, info_i


def _assemble(dem, truth_t, truth_q, gps, imu_rp, rels, dem_alt, smoothness=True):
    info_m, info_g, info_i = _default_infos()
    per_node = []
    n = truth_t.shape[0]
    for k in range(n):
        cs = [
            pg.GpsPrior(k, gps[k].copy(), info_g),
            pg.ImuPrior(k, imu_rp[k].copy(), info_i),
            pg.DemPrior(k, float(dem_alt[k]), 1.0 / DEM_SIGMA**2),
        ]
        if k > 0:
            rt, rq = rels[k - 1]
            cs.append(pg.MotionEdge(k - 1, k, rt.copy(), rq.copy(), info_m))
            if smoothness:
                cs.append(pg.AltitudeSmoothness(k - 1, k, 1.0 / SMOOTH_SIGMA**2))
        per_node.append(cs)
    return per_node


def _dead_reckon(start_t, start_q, rels, bias_t=None, bias_q=None):
    """Integrate relative motions from a start pose, optionally with a
    constant per-step bias (models uncorrected odometry drift)."""
    ts, qs = [np.asarray(start_t, dtype=float)], [np.asarray(start_q, dtype=float)]
    for rt, rq in rels:
        if bias_t is not None:
            rt = rt + bias_t
        if bias_q is not None:
            rq = pg.quat_mul(rq, bias_q)
        t, q = pg._se3_mul(ts[-1], qs[-1], rt, rq)
        ts.append(t)
        qs.append(q)
    return np.array(ts), np.array(qs)


def _relative_motions(truth_t, truth_q):
    n = truth_t.shape[0]
    return [
        pg._se3_mul(*pg._se3_inv(truth_t[k - 1], truth_q[k - 1]), truth_t[k], truth_q[k])
        for k in range(1, n)
    ]


def build_drift_scenario(seed: int = 5, n: int = 200) -> LocalizationScenario:
    """Consistent measurements, drifting dead-reckoned initialization.

    Every sensor reading is exact, so the full-batch MAP is a fixed target;
    the initialization accumulates a constant odometry bias (2 cm / 1 cm /
    5 mm per step plus 0.2 degree yaw), reaching tens of meters of drift by
    the end of the run. Recovering from that drift is the localizer's job.
    """
    dem = rolling_dem(seed)
    truth_t, truth_q = _truth_path(dem, n)
    rels = _relative_motions(truth_t, truth_q)
    imu_rp = np.array([pg.roll_pitch(q) for q in truth_q])
    dem_alt = np.array([dem.altitude(t[0], t[1]) for t in truth_t])
    per_node = _assemble(dem, truth_t, truth_q, truth_t, imu_rp, rels, dem_alt)

    bias_t = np.array([0.02, 0.01, 0.005])
    bias_q = pg.rotvec_to_quat(np.array([0.0, 0.0, math.radians(0.2)]))
    init_t, init_q = _dead_reckon(truth_t[0], truth_q[0], rels, bias_t, bias_q)
    return LocalizationScenario(dem, truth_t, truth_q, init_t, init_q,
                                per_node, truth_t.copy())


def build_consistent_scenario(seed: int = 0, n: int = 80) -> LocalizationScenario:
    """Drift-free run over flat terrain: all constraints are satisfied
    exactly at the truth, so the MAP estimate IS the truth and any sane
    solver configuration must land on it regardless of window size."""
    dem = flat_dem()
    truth_t, truth_q = _truth_path(dem, n)
    rels = _relative_motions(truth_t, truth_q)
    imu_rp = np.array([pg.roll_pitch(q) for q in truth_q])
    dem_alt = np.array([dem.altitude(t[0], t[1]) for t in truth_t])
    per_node = _assemble(dem, truth_t, truth_q, truth_t, imu_rp, rels, dem_alt)

    bias_t = np.array([0.01, 0.005, 0.002])
    bias_q = pg.rotvec_to_quat(np.array([0.0, 0.0, math.radians(0.1)]))
    init_t, init_q = _dead_reckon(truth_t[0], truth_q[0], rels, bias_t, bias_q)
    return LocalizationScenario(dem, truth_t, truth_q, init_t, init_q,
                                per_node, truth_t.copy())


def build_noisy_gps_scenario(seed: int = 0, n: int = 60) -> LocalizationScenario:
    """Every cue carries its nominal noise; the question is whether fusing
    them beats trusting GPS alone."""
    dem = rolling_dem(seed)
    truth_t, truth_q = _truth_path(dem, n)
    rels_true = _relative_motions(truth_t, truth_q)
    rng = np.random.default_rng([seed, _SALT_NOISE])

    gps = truth_t + rng.normal(0.0, 1.0, (n, 3)) * [GPS_SIGMA_XY, GPS_SIGMA_XY, GPS_SIGMA_Z]
    imu_rp = np.array([pg.roll_pitch(q) for q in truth_q])
    imu_rp = imu_rp + rng.normal(0.0, IMU_SIGMA, (n, 2))
    dem_alt = np.array([dem.altitude(t[0], t[1]) for t in truth_t])
    dem_alt = dem_alt + rng.normal(0.0, DEM_SIGMA, n)
    rels = []
    for rt, rq in rels_true:
        nt = rt + rng.normal(0.0, 0.2 * ODOM_SIGMA_T, 3)
        nq = pg.quat_mul(rq, pg.rotvec_to_quat(rng.normal(0.0, 0.2 * ODOM_SIGMA_R, 3)))
        rels.append((nt, nq))

    per_node = _assemble(dem, truth_t, truth_q, gps, imu_rp, rels, dem_alt)
    init_t, init_q = _dead_reckon(gps[0], truth_q[0], rels)
    return LocalizationScenario(dem, truth_t, truth_q, init_t, init_q, per_node, gps)


# ---------------------------------------------------------------------------
# runners

def run_batch(sc: LocalizationScenario, cfg: pg.WindowConfig | None = None):
    """Optimize the whole run at once; returns (trajectory dict, result)."""
    cfg = cfg or pg.WindowConfig(window_size=10**9, epsilon=1e-10, max_iterations=100)
    graph = pg.PoseGraph(cfg)
    for k in range(sc.n):
        graph.add_node(sc.node(k))
        for c in sc.constraints[k]:
            graph.add_constraint(c)
    result = pg.optimize(graph, cfg)
    return graph.trajectory(), result


def run_sliding(sc: LocalizationScenario, cfg: pg.WindowConfig | None = None):
    """Feed nodes one by one through the sliding-window localizer."""
    cfg = cfg or pg.WindowConfig(window_size=40, epsilon=1e-8)
    graph = pg.PoseGraph(cfg)
    for k in range(sc.n):
        pg.slide(graph, sc.node(k), sc.constraints[k], cfg)
    return graph.trajectory()


def trajectory_rmse(traj: dict, truth: np.ndarray) -> float:
    err = np.array([traj[k] - truth[k] for k in sorted(traj)])
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def gps_rmse(sc: LocalizationScenario) -> float:
    """RMSE of the raw GPS fixes treated as a trajectory estimate."""
    return float(np.sqrt(np.mean(np.sum((sc.gps - sc.truth_t) ** 2, axis=1))))


# ---------------------------------------------------------------------------
# aerial-ground registration scenarios

_SALT_AERIAL_RENDER = 100000
_SALT_GROUND_RENDER = 200000

# the survey strip a ground robot covers, in field-frame y
STRIP_Y = (3.2, 6.8)


@dataclass
class RegistrationScenario:
    """Aerial map, ground strip map, and the planted frame misalignment."""

    aerial: "ColoredCloud"
    ground: "ColoredCloud"
    truth: "AffineTransform3D"   # maps field-frame points into the ground frame


def _registration_field(seed: int) -> "FieldSpec":
    # irregular stand: strong stem jitter, varied canopies, plenty of weeds.
    # registration needs locally unique vegetation constellations; a clean
    # nursery lattice is self-similar and unmatchable at these cell sizes.
    return FieldSpec(
        extent=(10.0, 10.0),
        row_spacing=0.5,
        lattice_jitter_sigma=0.04,
        crop_radius_range=(0.03, 0.08),
        weed_density=2.0,
        terrain=TerrainParams(base_altitude=0.0, roughness_amplitude=0.3,
                              correlation_length=3.0),
        seed=seed,
    )


def misalignment_transform(offset=(0.9, -1.2, 0.0), scale: float = 1.1,
                           yaw_deg: float = 3.0) -> AffineTransform3D:
    """Similarity transform emulating geo-tag, scale, and heading error."""
    th = math.radians(yaw_deg)
    rot = np.array([
        [math.cos(th), -math.sin(th), 0.0],
        [math.sin(th), math.cos(th), 0.0],
        [0.0, 0.0, 1.0],
    ])
    return AffineTransform3D(scale * rot, np.asarray(offset, dtype=float))


def build_registration_scenario(seed: int = 0, misaligned: bool = True,
                                strip_y: tuple = STRIP_Y) -> RegistrationScenario:
    """Aerial survey cloud plus a denser, misaligned ground strip cloud.

    The aerial cloud covers the whole field at UAV-like sampling; the
    ground cloud covers only the strip, four times denser, and is carried
    into its own frame by the planted misalignment.
    """
    spec = _registration_field(seed)
    truth_field = generate(spec)
    aerial = cloud_from_render(
        render_grid(truth_field, cell_size=0.04, seed=_SALT_AERIAL_RENDER + seed))
    dense = cloud_from_render(
        render_grid(truth_field, cell_size=0.02, seed=_SALT_GROUND_RENDER + seed))
    lo, hi = strip_y
    keep = (dense.points[:, 1] >= lo) & (dense.points[:, 1] <= hi)
    ground = ColoredCloud(dense.points[keep], dense.colors[keep])

    truth = misalignment_transform() if misaligned \
        else AffineTransform3D.identity()
    if misaligned:
        ground = ground.transformed(truth.apply)
    return RegistrationScenario(aerial, ground, truth)


# --- stem matching across sessions --------------------------------------

_SALT_TEMPORAL = 300000


@dataclass(frozen=True)
class TemporalScenario:
    stems_t0: np.ndarray     # (n, 2) stem positions at the first session
    stems_t1: np.ndarray     # (m, 2) surviving stems in the later frame
    truth_map: np.ndarray    # (n,) index into stems_t1, -1 where dropped
    transform: Similarity2D  # planted session-0 -> session-1 similarity


def build_temporal_scenario(seed: int = 0, scale: float = 1.3,
                            rotation_deg: float = 20.0,
                            translation: tuple = (2.0, -1.0),
                            dropout: float = 0.2,
                            noise_sigma: float = 0.01) -> TemporalScenario:
    """Two stem maps of one field taken sessions apart.

    Session 0 is a jittered lattice of crop stems; session 1 re-detects a
    random subset of them (some plants die or go undetected), measured in
    a frame related to session 0 by a similarity, with fresh detection
    noise, and returned in arbitrary order.
    """
    rng = np.random.default_rng([seed, _SALT_TEMPORAL])
    xs = np.arange(0.1, 8.0, 0.2)
    ys = np.arange(0.25, 6.0, 0.5)
    gx, gy = np.meshgrid(xs, ys)
    stems_t0 = np.column_stack([gx.ravel(), gy.ravel()])
    stems_t0 = stems_t0 + rng.normal(0.0, 0.02, stems_t0.shape)

    survivors = np.flatnonzero(rng.random(len(stems_t0)) >= dropout)
    truth = Similarity2D(scale, math.radians(rotation_deg),
                         np.asarray(translation, dtype=float))
    stems_t1 = truth.apply(stems_t0[survivors])
    stems_t1 = stems_t1 + rng.normal(0.0, noise_sigma, stems_t1.shape)
    perm = rng.permutation(len(stems_t1))
    stems_t1 = stems_t1[perm]

    truth_map = np.full(len(stems_t0), -1, dtype=int)
    truth_map[survivors] = np.argsort(perm)
    return TemporalScenario(stems_t0, stems_t1, truth_map, truth)
