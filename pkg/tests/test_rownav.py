import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agrisim import fieldgen, rownav
from agrisim.errors import ContractViolationError, NoPatternError
from agrisim.rownav import (
    FeatureGrid,
    Pattern,
    PatternSearch,
    RowRelativePose,
    classify_by_geometry,
    detect_pattern,
    ekf_correct_gps,
    ekf_correct_pattern,
    ekf_predict,
    extract_feature_grid,
    transform_pattern,
)


def brute_force_pattern(features: FeatureGrid, search: PatternSearch, tol: float) -> Pattern:
    """Independent pure-python triple-loop argmax with the documented tie-break."""
    pos, w = features.features()
    pos = pos.tolist()
    w = w.tolist()
    best_key = None
    best = None
    for theta in search.thetas().tolist():
        n0, n1 = -math.sin(theta), math.cos(theta)
        proj = [x * n0 + y * n1 for x, y in pos]
        for s in search.spacings().tolist():
            for o in search.offsets(s).tolist():
                support = 0.0
                for p, wi in zip(proj, w):
                    r = p % s
                    d = abs(r - o)
                    d = min(d, s - d)
                    if d <= tol:
                        support += wi
                key = (-support, s, abs(theta), theta, o)
                if best_key is None or key < best_key:
                    best_key = key
                    best = (theta, s, o, support)
    return Pattern(*best)


def grid_from_cells(cells, shape=(32, 32), cell_size=0.1, weights=None):
    w = np.zeros(shape)
    for i, (r, c) in enumerate(cells):
        w[r, c] += 1.0 if weights is None else weights[i]
    return FeatureGrid(w, cell_size)


SMALL_SEARCH = PatternSearch(
    theta_range=(math.radians(-30), math.radians(30)),
    theta_step=math.radians(5),
    spacing_range=(0.3, 0.7),
    spacing_step=0.05,
    offset_step=0.05,
)


def test_planted_pattern_recovered_within_one_bin():
    search = PatternSearch(
        theta_range=(math.radians(-10), math.radians(10)),
        theta_step=math.radians(1),
        spacing_range=(0.3, 0.7),
        spacing_step=0.01,
        offset_step=0.01,
    )
    # features exactly on lines theta=0, s=0.5, o=0.25; enough rows that no
    # rival spacing covers every feature, and tol below the offset step so
    # no neighboring offset ties with the true one on noise-free input
    cells = [(2 + 5 * k, c) for k in range(9) for c in range(0, 16, 3)]
    fg = grid_from_cells(cells, shape=(48, 16))
    pat = detect_pattern(fg, search, tol=0.004)
    assert abs(pat.theta) <= math.radians(1) + 1e-12
    assert abs(pat.spacing - 0.5) <= 0.01 + 1e-12
    assert min(abs(pat.offset - 0.25), 0.5 - abs(pat.offset - 0.25)) <= 0.01 + 1e-12
    assert pat.score == len(cells)


def test_empty_or_singleton_grid_raises():
    with pytest.raises(NoPatternError):
        detect_pattern(FeatureGrid(np.zeros((8, 8)), 0.1), SMALL_SEARCH)
    with pytest.raises(NoPatternError):
        detect_pattern(grid_from_cells([(3, 3)], (8, 8)), SMALL_SEARCH)


def test_brute_force_equivalence_fixed_cases():
    rng = np.random.default_rng(0)
    for trial in range(6):
        h = int(rng.integers(8, 64))
        wdt = int(rng.integers(8, 64))
        n = int(rng.integers(2, 30))
        cells = {(int(rng.integers(h)), int(rng.integers(wdt))) for _ in range(n)}
        weights = rng.integers(1, 4, len(cells)).astype(float)
        fg = grid_from_cells(sorted(cells), (h, wdt), 0.1, weights)
        got = detect_pattern(fg, SMALL_SEARCH, tol=0.03)
        want = brute_force_pattern(fg, SMALL_SEARCH, tol=0.03)
        assert (got.theta, got.spacing, got.offset, got.score) == (
            want.theta,
            want.spacing,
            want.offset,
            want.score,
        )


@given(data=st.data())
@settings(max_examples=12, deadline=None)
def test_brute_force_equivalence_property(data):
    h = data.draw(st.integers(6, 24), label="h")
    wdt = data.draw(st.integers(6, 24), label="w")
    n = data.draw(st.integers(2, 16), label="n")
    cells = data.draw(
        st.lists(
            st.tuples(st.integers(0, h - 1), st.integers(0, wdt - 1)),
            min_size=n,
            max_size=n,
            unique=True,
        )
    )
    fg = grid_from_cells(cells, (h, wdt), 0.1)
    got = detect_pattern(fg, SMALL_SEARCH, tol=0.03)
    want = brute_force_pattern(fg, SMALL_SEARCH, tol=0.03)
    assert (got.theta, got.spacing, got.offset, got.score) == (
        want.theta,
        want.spacing,
        want.offset,
        want.score,
    )


def test_detection_translation_covariance():
    cells = [(r, c) for r in (2, 7, 12, 17) for c in range(0, 20, 2)]
    fg = grid_from_cells(cells, (24, 24), 0.1)
    base = detect_pattern(fg, SMALL_SEARCH, tol=0.03)
    shifted = FeatureGrid(fg.weights, fg.cell_size, fg.origin + np.array([0.0, 0.15]))
    moved = detect_pattern(shifted, SMALL_SEARCH, tol=0.03)
    assert moved.theta == base.theta
    assert moved.spacing == base.spacing
    assert moved.score == base.score
    d = abs((moved.offset - base.offset - 0.15) % base.spacing)
    d = min(d, base.spacing - d)
    assert d <= 0.05 + 1e-9  # one offset bin


def test_detection_rotation_covariance():
    rng = np.random.default_rng(3)
    # plant rows at theta = 0 directly as scattered points on a fine grid
    pts = []
    for off in (0.55, 1.05, 1.55):
        for x in np.arange(0.2, 2.3, 0.12):
            pts.append((x, off))
    phi = math.radians(10)
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    size = 48
    w0 = np.zeros((size, size))
    w1 = np.zeros((size, size))
    for x, y in pts:
        w0[int(y / 0.05), int(x / 0.05)] = 1.0
        xr, yr = R @ np.array([x, y])
        w1[int(yr / 0.05), int(xr / 0.05)] = 1.0
    search = PatternSearch(
        theta_range=(math.radians(-20), math.radians(20)),
        theta_step=math.radians(2),
        spacing_range=(0.4, 0.6),
        spacing_step=0.02,
        offset_step=0.02,
    )
    a = detect_pattern(FeatureGrid(w0, 0.05), search, tol=0.04)
    b = detect_pattern(FeatureGrid(w1, 0.05), search, tol=0.04)
    assert abs(a.theta) <= math.radians(2) + 1e-9
    assert abs(b.theta - phi) <= math.radians(2) + 1e-9


def test_detection_robust_to_interrow_weed_clutter():
    # plant footprint ~0.10 m, weeds ~30% of crop count
    spec = fieldgen.FieldSpec(
        extent=(6.0, 4.0),
        row_spacing=0.5,
        crop_lattice=0.15,
        weed_density=4.0,
        crop_radius_range=(0.045, 0.055),
        seed=7,
    )
    truth = fieldgen.generate(spec)
    n_weeds = len(truth.weeds())
    n_crops = len(truth.crops())
    assert 0.2 < n_weeds / n_crops < 0.45
    grid = fieldgen.render_grid(truth, cell_size=0.04, seed=3)
    fg = extract_feature_grid(grid)
    search = PatternSearch(
        theta_range=(math.radians(-10), math.radians(10)),
        theta_step=math.radians(1),
        spacing_range=(0.3, 0.7),
        spacing_step=0.01,
        offset_step=0.01,
    )
    pat = detect_pattern(fg, search, tol=0.05)
    assert abs(pat.theta - truth.row_theta) <= math.radians(1) + 1e-9
    assert abs(pat.spacing - spec.row_spacing) <= 0.01 + 1e-9
    off_err = abs((pat.offset - truth.row_offsets[0]) % pat.spacing)
    assert min(off_err, pat.spacing - off_err) <= 0.02 + 1e-9


# ---------------------------------------------------------------------------
# EKF


def diag_pose(p=(0.5, 0.5, 0.1), mean=(0.0, 0.0, 0.0)):
    return RowRelativePose(np.array(mean), np.diag(p))


def test_predict_zero_twist_keeps_mean_inflates_cov():
    pose = diag_pose()
    out = ekf_predict(pose, (0.0, 0.0), None, dt=1.0)
    assert np.array_equal(out.mean, pose.mean)
    assert np.trace(out.cov) > np.trace(pose.cov)


def test_predict_moves_along_heading():
    pose = diag_pose(mean=(1.0, 2.0, math.pi / 2))
    out = ekf_predict(pose, (2.0, 0.0), None, dt=0.5)
    assert out.mean[0] == pytest.approx(1.0)
    assert out.mean[1] == pytest.approx(3.0)


def test_predict_fuses_yaw_rates():
    pose = diag_pose()
    out = ekf_predict(pose, (0.0, 0.2), 0.4, dt=1.0, yaw_blend=0.5)
    assert out.mean[2] == pytest.approx(0.3)


def test_predict_rejects_bad_inputs():
    with pytest.raises(ContractViolationError):
        ekf_predict(diag_pose(), (0.0, 0.0), None, dt=0.0)
    bad = RowRelativePose(np.zeros(3), -np.eye(3))
    with pytest.raises(ContractViolationError):
        ekf_predict(bad, (0.0, 0.0), None, dt=1.0)
    with pytest.raises(ContractViolationError):
        ekf_correct_gps(bad, [0.0, 0.0], np.eye(2))


def test_zero_innovation_keeps_mean_shrinks_cov():
    pose = diag_pose(mean=(1.0, 0.1, 0.05))
    row_map = Pattern(0.0, 0.5, 0.25)
    # detected pattern exactly as predicted from the pose
    pred_theta = rownav.wrap_half_pi(row_map.theta - pose.mean[2])
    pred_offset = (row_map.offset - pose.mean[1]) % row_map.spacing
    out = ekf_correct_pattern(pose, Pattern(pred_theta, 0.5, pred_offset), row_map)
    assert np.allclose(out.mean, pose.mean, atol=1e-12)
    assert np.trace(out.cov) < np.trace(pose.cov)


def test_pattern_correction_scalar_kalman_oracle():
    p_y, r_o = 0.3, 0.02**2
    pose = RowRelativePose(np.array([2.0, 0.12, 0.0]), np.diag([0.7, p_y, 0.0]))
    row_map = Pattern(0.0, 0.5, 0.25)
    detected = Pattern(0.0, 0.5, 0.18)
    out = ekf_correct_pattern(
        pose, detected, row_map, meas_noise=np.diag([r_o, math.radians(1.0) ** 2])
    )
    pred_offset = (0.25 - 0.12) % 0.5
    nu = 0.18 - pred_offset
    k = p_y / (p_y + r_o)
    # lines move +nu in offset <=> robot sits -nu of believed lateral position
    assert out.mean[1] == pytest.approx(0.12 - k * nu, abs=1e-9)
    assert out.cov[1, 1] == pytest.approx(p_y * r_o / (p_y + r_o), abs=1e-9)
    assert out.mean[0] == 2.0  # along-row untouched


def test_gps_correction_scalar_kalman_oracle():
    p = 0.4
    r = 0.05
    pose = RowRelativePose(np.array([1.0, -0.5, 0.2]), np.diag([p, p, 0.3]))
    out = ekf_correct_gps(pose, [1.3, -0.1], np.diag([r, r]))
    k = p / (p + r)
    assert out.mean[0] == pytest.approx(1.0 + k * 0.3, abs=1e-9)
    assert out.mean[1] == pytest.approx(-0.5 + k * 0.4, abs=1e-9)
    assert out.cov[0, 0] == pytest.approx(p * r / (p + r), abs=1e-9)
    assert out.mean[2] == 0.2


def test_pattern_correction_never_moves_along_row():
    rng = np.random.default_rng(5)
    for _ in range(20):
        theta_f = rng.uniform(-1.2, 1.2)
        row_map = Pattern(theta_f, 0.5, rng.uniform(0, 0.5))
        A = rng.normal(size=(3, 3))
        pose = RowRelativePose(rng.normal(size=3), A @ A.T + 0.01 * np.eye(3))
        detected = Pattern(rng.uniform(-1.5, 1.5), 0.5, rng.uniform(0, 0.5))
        out = ekf_correct_pattern(pose, detected, row_map)
        t = rownav.line_tangent(theta_f)
        along = float(t @ (out.mean[:2] - pose.mean[:2]))
        assert abs(along) < 1e-10


@given(data=st.data())
@settings(max_examples=30, deadline=None)
def test_correction_trace_never_increases(data):
    vals = data.draw(
        st.lists(st.floats(0.01, 2.0), min_size=9, max_size=9), label="A"
    )
    A = np.array(vals).reshape(3, 3)
    cov = A @ A.T + 0.05 * np.eye(3)
    mean = np.array(data.draw(st.lists(st.floats(-2, 2), min_size=3, max_size=3)))
    pose = RowRelativePose(mean, cov)
    gps = ekf_correct_gps(pose, mean[:2] + 0.1, np.eye(2) * 0.01)
    assert np.trace(gps.cov) <= np.trace(cov) + 1e-9
    out = ekf_correct_pattern(pose, Pattern(0.1, 0.5, 0.3), Pattern(0.0, 0.5, 0.25))
    assert np.trace(out.cov) <= np.trace(cov) + 1e-9


def test_heading_correction_converges_to_true_row_angle():
    row_map = Pattern(0.0, 0.5, 0.25)
    true_heading = 0.3
    pose = RowRelativePose(np.array([0.0, 0.0, 0.1]), np.diag([0.2, 0.2, 0.5]))
    detected = Pattern(row_map.theta - true_heading, 0.5, 0.25)
    for _ in range(10):
        pose = ekf_correct_pattern(pose, detected, row_map)
    assert pose.mean[2] == pytest.approx(true_heading, abs=5e-3)


# ---------------------------------------------------------------------------
# classifier


def test_lattice_plant_is_crop_midrow_plant_is_weed():
    pat = Pattern(0.0, 0.5, 0.25)
    stems = np.array(
        [
            [1.0, 0.25],  # on row, on lattice (phase set by itself and friends)
            [1.2, 0.25],  # on row, on lattice
            [1.4, 0.25],
            [1.3, 0.25],  # on row but off the 0.2 lattice
            [1.0, 0.5],  # midway between rows
        ]
    )
    labels = classify_by_geometry(stems, pat, lattice=0.2, d_row=0.04, d_lattice=0.04)
    assert labels == ["crop", "crop", "crop", "weed", "weed"]


def test_classifier_requires_positive_tolerances():
    with pytest.raises(ContractViolationError):
        classify_by_geometry(np.zeros((1, 2)), Pattern(0.0, 0.5, 0.25), 0.2, -1.0, 0.04)


def test_classifier_rigid_invariance():
    rng = np.random.default_rng(11)
    pat = Pattern(0.1, 0.5, 0.2)
    stems = rng.uniform(0, 4, size=(60, 2))
    base = classify_by_geometry(stems, pat, 0.2, 0.05, 0.05)
    phi = 0.7
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    t = np.array([3.0, -1.5])
    moved = stems @ R.T + t
    pat2 = transform_pattern(pat, phi, t)
    assert classify_by_geometry(moved, pat2, 0.2, 0.05, 0.05) == base


def test_classifier_baseline_on_synthetic_field(small_field):
    spec = small_field.spec
    pat = Pattern(
        small_field.row_theta, spec.row_spacing, small_field.row_offsets[0] % spec.row_spacing
    )
    labels = classify_by_geometry(
        small_field.stems_xy(), pat, spec.crop_lattice, d_row=0.04, d_lattice=0.04
    )
    truth_crop = np.array([p.species == "crop" for p in small_field.plants])
    pred_crop = np.array([lab == "crop" for lab in labels])
    recall = (pred_crop & truth_crop).sum() / truth_crop.sum()
    precision = (pred_crop & truth_crop).sum() / max(pred_crop.sum(), 1)
    # frozen regression baseline for this seed
    assert recall >= 0.95
    assert precision >= 0.90


def test_feature_extraction_finds_one_centroid_per_plant():
    spec = fieldgen.FieldSpec(extent=(3.0, 2.0), weed_density=0.0, crop_lattice=0.3, seed=15)
    truth = fieldgen.generate(spec)
    grid = fieldgen.render_grid(truth, cell_size=0.03, seed=1)
    fg = extract_feature_grid(grid)
    n_feat = int((fg.weights > 0).sum())
    assert abs(n_feat - len(truth.plants)) <= 0.1 * len(truth.plants)
    pos, w = fg.features()
    stems = truth.stems_xy()
    d = np.min(np.linalg.norm(pos[:, None, :] - stems[None, :, :], axis=2), axis=1)
    assert np.median(d) < 0.05
