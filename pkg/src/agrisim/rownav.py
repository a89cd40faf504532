"""Crop-row detection, row-relative EKF localization, and geometric classification.

The Pattern Hough Transform votes over (orientation, spacing, offset) for
the family of parallel equidistant lines best supported by plant features,
in one step, which keeps it robust to inter-row weed clutter. The EKF
fuses odometry/IMU prediction with pattern corrections (lateral + heading
only) and GPS corrections (position). The classifier labels plants as crop
exactly when they sit on the row-and-lattice grid within tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractViolationError, NoPatternError
from .grids import GridMap2D
from .spectral import DEFAULT_EXG_THRESHOLD, vegetation_mask

__all__ = [
    "Pattern",
    "FeatureGrid",
    "RowRelativePose",
    "PatternSearch",
    "detect_pattern",
    "pattern_line_distance",
    "extract_feature_grid",
    "ekf_predict",
    "ekf_correct_pattern",
    "ekf_correct_gps",
    "classify_by_geometry",
    "transform_pattern",
]


def wrap_half_pi(theta: float) -> float:
    """Wrap an undirected line orientation into [-pi/2, pi/2)."""
    return (theta + math.pi / 2.0) % math.pi - math.pi / 2.0


def line_normal(theta: float) -> np.ndarray:
    return np.array([-math.sin(theta), math.cos(theta)])


def line_tangent(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


@dataclass
class Pattern:
    """Parallel equidistant lines {p : p.n(theta) = offset + k*spacing}."""

    theta: float
    spacing: float
    offset: float
    score: float = 0.0

    def __post_init__(self):
        if self.spacing <= 0:
            raise ContractViolationError("pattern spacing must be positive")
        self.theta = wrap_half_pi(self.theta)
        self.offset = self.offset % self.spacing

    def line_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point (N, 2) to the nearest pattern line."""
        return pattern_line_distance(points, self.theta, self.spacing, self.offset)


def pattern_line_distance(points: np.ndarray, theta: float, spacing: float, offset: float) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    proj = points @ line_normal(theta)
    r = (proj - offset) % spacing
    return np.minimum(r, spacing - r)


@dataclass
class FeatureGrid:
    """Weighted occupancy raster of plant features in the robot-local frame."""

    weights: np.ndarray
    cell_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        if self.weights.ndim != 2:
            raise ContractViolationError("feature grid must be 2-D")
        if np.any(self.weights < 0):
            raise ContractViolationError("feature weights must be non-negative")
        if self.cell_size <= 0:
            raise ContractViolationError("cell_size must be positive")

    def features(self) -> tuple[np.ndarray, np.ndarray]:
        """(positions (N, 2), weights (N,)) of the non-empty cells."""
        rows, cols = np.nonzero(self.weights)
        pos = np.stack(
            [
                self.origin[0] + (cols + 0.5) * self.cell_size,
                self.origin[1] + (rows + 0.5) * self.cell_size,
            ],
            axis=1,
        )
        return pos, self.weights[rows, cols]


@dataclass
class PatternSearch:
    """Discretized Hough search space.

    Axis values are lo + k*step for k = 0.. while the value stays <= hi
    (within 1e-9 slack); offsets for spacing s are k*offset_step strictly
    below s. detect_pattern scores every triple on this exact grid.
    """

    theta_range: tuple[float, float] = (-math.pi / 2, math.pi / 2 - math.radians(1.0))
    theta_step: float = math.radians(1.0)
    spacing_range: tuple[float, float] = (0.2, 1.0)
    spacing_step: float = 0.01
    offset_step: float = 0.01

    def thetas(self) -> np.ndarray:
        return _axis(self.theta_range[0], self.theta_range[1], self.theta_step)

    def spacings(self) -> np.ndarray:
        s = _axis(self.spacing_range[0], self.spacing_range[1], self.spacing_step)
        if np.any(s <= 0):
            raise ContractViolationError("spacing range must be positive")
        return s

    def offsets(self, spacing: float) -> np.ndarray:
        n = int(math.floor(spacing / self.offset_step - 1e-9)) + 1
        return self.offset_step * np.arange(max(n, 1))


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ContractViolationError("search step must be positive")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(max(n, 1))


def detect_pattern(features: FeatureGrid, search: PatternSearch, tol: float = 0.03) -> Pattern:
    """Best-supported line pattern over the discretized parameter grid.

    Support of (theta, spacing, offset) is the weight sum of features whose
    distance to the nearest pattern line is <= tol. Ties break toward
    smaller spacing, then smaller |theta|, then theta, then smaller offset.
    """
    pos, w = features.features()
    if len(pos) < 2:
        raise NoPatternError("pattern detection needs at least two feature cells")
    thetas = search.thetas()
    spacings = search.spacings()

    best_key = None
    best = None
    for theta in thetas:
        n = line_normal(theta)
        # elementwise (not BLAS) so support sums are reproducible bit-for-bit
        proj = pos[:, 0] * n[0] + pos[:, 1] * n[1]
        for s in spacings:
            offsets = search.offsets(s)
            r = proj % s
            diff = np.abs(r[:, None] - offsets[None, :])
            dist = np.minimum(diff, s - diff)
            support = w @ (dist <= tol)
            k = int(np.argmax(support))  # first max: smallest offset
            key = (-support[k], s, abs(theta), theta, offsets[k])
            if best_key is None or key < best_key:
                best_key = key
                best = Pattern(theta, float(s), float(offsets[k]), float(support[k]))
    return best


def extract_feature_grid(grid: GridMap2D, threshold: float = DEFAULT_EXG_THRESHOLD) -> FeatureGrid:
    """Plant features as connected-component centroids of the vegetation mask."""
    mask = vegetation_mask(grid, threshold)
    labels, n = ndimage.label(mask)
    weights = np.zeros(grid.shape)
    if n > 0:
        centroids = ndimage.center_of_mass(mask, labels, np.arange(1, n + 1))
        for cy, cx in centroids:
            weights[int(round(cy)), int(round(cx))] += 1.0
    return FeatureGrid(weights, grid.cell_size, grid.origin.copy())


# ---------------------------------------------------------------------------
# Row-relative EKF

@dataclass
class RowRelativePose:
    """Gaussian pose belief (x_along, y_lateral, heading) in the field frame."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.cov = np.asarray(self.cov, dtype=float).reshape(3, 3)


def _check_spd(m: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if not np.allclose(m, m.T, atol=1e-9):
        raise ContractViolationError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) < -tol:
        raise ContractViolationError(f"{name} must be positive semi-definite")


DEFAULT_PROCESS_NOISE = np.diag([1e-4, 1e-4, 1e-4])  # per second
DEFAULT_PATTERN_NOISE = np.diag([0.02**2, math.radians(1.0) ** 2])


def ekf_predict(
    pose: RowRelativePose,
    odom_twist: tuple[float, float],
    imu_yaw_rate: float | None,
    dt: float,
    process_noise: np.ndarray = DEFAULT_PROCESS_NOISE,
    yaw_blend: float = 0.5,
) -> RowRelativePose:
    """Unicycle prediction with odometry/IMU-fused yaw rate."""
    if dt <= 0:
        raise ContractViolationError("dt must be positive")
    _check_spd(pose.cov, "pose covariance")
    v, omega_odom = odom_twist
    omega = omega_odom if imu_yaw_rate is None else (1 - yaw_blend) * omega_odom + yaw_blend * imu_yaw_rate
    x, y, h = pose.mean
    mean = np.array([x + v * math.cos(h) * dt, y + v * math.sin(h) * dt, h + omega * dt])
    F = np.array(
        [
            [1.0, 0.0, -v * math.sin(h) * dt],
            [0.0, 1.0, v * math.cos(h) * dt],
            [0.0, 0.0, 1.0],
        ]
    )
    cov = F @ pose.cov @ F.T + np.asarray(process_noise, dtype=float) * dt
    return RowRelativePose(mean, cov)


def _joseph_update(pose: RowRelativePose, H: np.ndarray, innovation: np.ndarray, R: np.ndarray, gain_projector=None) -> RowRelativePose:
    P = pose.cov
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    if gain_projector is not None:
        K = gain_projector @ K
    mean = pose.mean + K @ innovation
    IKH = np.eye(3) - K @ H
    cov = IKH @ P @ IKH.T + K @ R @ K.T
    return RowRelativePose(mean, 0.5 * (cov + cov.T))


def ekf_correct_pattern(
    pose: RowRelativePose,
    detected: Pattern,
    row_map: Pattern,
    meas_noise: np.ndarray = DEFAULT_PATTERN_NOISE,
) -> RowRelativePose:
    """Correct lateral offset (modulo spacing) and heading from a detected pattern.

    The detected pattern is expressed in the robot frame, the row map in the
    field frame. The pattern carries no along-row information, so the gain
    is projected to leave the along-row coordinate untouched (Joseph form
    keeps the covariance consistent and its trace non-increasing).
    """
    _check_spd(pose.cov, "pose covariance")
    _check_spd(meas_noise, "measurement noise")
    s = row_map.spacing
    n_f = line_normal(row_map.theta)
    x, y, h = pose.mean

    pred_theta = wrap_half_pi(row_map.theta - h)
    pred_offset = (row_map.offset - (x * n_f[0] + y * n_f[1])) % s

    # nearest modulo-spacing hypothesis for the lateral residual
    nu_o = (detected.offset - pred_offset + s / 2.0) % s - s / 2.0
    nu_t = (detected.theta - pred_theta + math.pi / 2.0) % math.pi - math.pi / 2.0
    innovation = np.array([nu_o, nu_t])

    H = np.array([[-n_f[0], -n_f[1], 0.0], [0.0, 0.0, -1.0]])
    t_f = line_tangent(row_map.theta)
    projector = np.eye(3)
    projector[:2, :2] -= np.outer(t_f, t_f)  # zero along-row gain
    return _joseph_update(pose, H, innovation, np.asarray(meas_noise, dtype=float), projector)


def ekf_correct_gps(pose: RowRelativePose, gps_xy, gps_cov) -> RowRelativePose:
    """Standard linear position update; supplies the along-row correction."""
    _check_spd(pose.cov, "pose covariance")
    gps_cov = np.asarray(gps_cov, dtype=float).reshape(2, 2)
    _check_spd(gps_cov, "gps covariance")
    H = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    innovation = np.asarray(gps_xy, dtype=float).reshape(2) - pose.mean[:2]
    return _joseph_update(pose, H, innovation, gps_cov)


# ---------------------------------------------------------------------------
# Geometric crop/weed classification

def classify_by_geometry(
    stems: np.ndarray,
    pattern: Pattern,
    lattice: float,
    d_row: float,
    d_lattice: float,
) -> list[str]:
    """Label stems 'crop' iff on a pattern line AND on that line's lattice grid.

    The along-row lattice phase of each line is estimated from the stems
    assigned to it (circular mean), which makes the labels invariant under
    a global rigid transform applied to both stems and pattern.
    """
    if d_row <= 0 or d_lattice <= 0 or lattice <= 0:
        raise ContractViolationError("tolerances and lattice must be positive")
    stems = np.asarray(stems, dtype=float).reshape(-1, 2)
    if len(stems) == 0:
        return []
    n = line_normal(pattern.theta)
    t = line_tangent(pattern.theta)
    proj = stems @ n
    k = np.round((proj - pattern.offset) / pattern.spacing)
    d_line = np.abs(proj - (pattern.offset + k * pattern.spacing))
    near_row = d_line <= d_row
    u = stems @ t

    labels = ["weed"] * len(stems)
    ang = 2.0 * math.pi / lattice
    for line_k in np.unique(k[near_row]):
        sel = near_row & (k == line_k)
        us = u[sel]
        phase = math.atan2(np.sin(ang * us).sum(), np.cos(ang * us).sum()) / ang % lattice
        r = (us - phase) % lattice
        d_lat = np.minimum(r, lattice - r)
        for idx, ok in zip(np.nonzero(sel)[0], d_lat <= d_lattice):
            if ok:
                labels[idx] = "crop"
    return labels


def transform_pattern(pattern: Pattern, rotation: float, translation) -> Pattern:
    """Pattern as seen after rotating points by `rotation` then translating."""
    translation = np.asarray(translation, dtype=float).reshape(2)
    theta_raw = pattern.theta + rotation
    theta = wrap_half_pi(theta_raw)
    offset = pattern.offset + translation @ line_normal(theta_raw)
    if round((theta_raw - theta) / math.pi) % 2 == 1:
        offset = -offset  # wrapping flipped the normal, reparametrize
    return Pattern(theta, pattern.spacing, offset % pattern.spacing, pattern.score)
