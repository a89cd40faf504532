import math

import numpy as np
import pytest
from scipy import stats

from agrisim import fieldgen
from agrisim.errors import InvalidSpecError
from agrisim.fieldgen import (
    CameraPath,
    DetectorParams,
    FieldSpec,
    FieldTruth,
    TerrainParams,
    row_normal,
    row_tangent,
)


def flat_spec(**kw):
    kw.setdefault("terrain", TerrainParams(base_altitude=0.0, roughness_amplitude=0.0))
    return FieldSpec(**kw)


# ---------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize(
    "kw",
    [
        {"extent": (0.0, 5.0)},
        {"row_spacing": -0.5},
        {"crop_lattice": 0.0},
        {"weed_density": -1.0},
        {"crop_radius_range": (0.06, 0.04)},
        {"weed_radius_range": (0.0, 0.05)},
        {"grass_weed_fraction": 1.5},
        {"lattice_jitter_sigma": -0.01},
    ],
)
def test_invalid_specs_rejected(kw):
    with pytest.raises(InvalidSpecError):
        fieldgen.generate(FieldSpec(**kw))


# ---------------------------------------------------------------------------
# generate


def test_zero_weeds_single_row_all_crops_on_line():
    spec = flat_spec(extent=(4.0, 0.6), weed_density=0.0, lattice_jitter_sigma=0.0, seed=3)
    truth = fieldgen.generate(spec)
    assert len(truth.row_offsets) == 1
    assert truth.plants and all(p.species == "crop" for p in truth.plants)
    n = row_normal(truth.row_theta)
    d = np.abs(truth.stems_xy() @ n - truth.row_offsets[0])
    assert d.max() <= 1e-9


def test_adjacent_row_gaps_equal_spacing():
    spec = flat_spec(extent=(4.0, 2.0), row_spacing=0.5, seed=5)
    truth = fieldgen.generate(spec)
    assert len(truth.row_offsets) == 4
    gaps = np.diff(truth.row_offsets)
    assert np.allclose(gaps, 0.5, atol=1e-12)


def test_crop_stems_stay_within_jitter_bound_of_rows():
    spec = flat_spec(extent=(6.0, 3.0), lattice_jitter_sigma=0.01, seed=9)
    truth = fieldgen.generate(spec)
    n = row_normal(truth.row_theta)
    proj = truth.stems_xy("crop") @ n
    d = np.min(np.abs(proj[:, None] - np.asarray(truth.row_offsets)[None, :]), axis=1)
    assert d.max() <= spec.jitter_bound + 1e-9


def test_cabbage_lattice_spacing_close_to_ten_centimeters():
    # pointed-cabbage-like crop: stems every ~0.10 m along the row
    spec = flat_spec(
        extent=(8.0, 1.0),
        crop_lattice=0.10,
        weed_density=0.0,
        lattice_jitter_sigma=0.005,
        seed=21,
    )
    truth = fieldgen.generate(spec)
    t = row_tangent(truth.row_theta)
    n = row_normal(truth.row_theta)
    stems = truth.stems_xy("crop")
    for off in truth.row_offsets:
        on_row = np.abs(stems @ n - off) <= spec.jitter_bound + 1e-9
        along = np.sort(stems[on_row] @ t)
        gaps = np.diff(along)
        assert abs(np.mean(gaps) - 0.10) < 0.01
        assert np.all(np.abs(gaps - 0.10) < 3 * spec.jitter_bound)


def test_rotated_rows_follow_requested_orientation():
    theta = math.radians(20)
    spec = flat_spec(extent=(6.0, 6.0), row_orientation=theta, lattice_jitter_sigma=0.0, seed=2)
    truth = fieldgen.generate(spec)
    assert truth.row_theta == pytest.approx(theta)
    n = row_normal(theta)
    proj = truth.stems_xy("crop") @ n
    d = np.min(np.abs(proj[:, None] - np.asarray(truth.row_offsets)[None, :]), axis=1)
    assert d.max() <= 1e-9


def test_stem_altitude_matches_dem():
    spec = FieldSpec(
        extent=(5.0, 5.0),
        terrain=TerrainParams(base_altitude=2.0, roughness_amplitude=0.3),
        seed=13,
    )
    truth = fieldgen.generate(spec)
    for p in truth.plants[:50]:
        assert p.stem[2] == pytest.approx(truth.dem.altitude(p.stem[0], p.stem[1]))


def test_weed_count_scales_with_density():
    area = 10.0 * 10.0
    spec = flat_spec(extent=(10.0, 10.0), weed_density=2.0, seed=17)
    truth = fieldgen.generate(spec)
    n_weeds = len(truth.weeds())
    lam = 2.0 * area
    assert abs(n_weeds - lam) < 4 * math.sqrt(lam)


def test_weed_positions_spatially_uniform():
    spec = flat_spec(extent=(10.0, 10.0), weed_density=10.0, grass_weed_fraction=0.0, seed=29)
    truth = fieldgen.generate(spec)
    pos = truth.stems_xy("weed")
    assert len(pos) > 800
    counts, _, _ = np.histogram2d(pos[:, 0], pos[:, 1], bins=5, range=[[0, 10], [0, 10]])
    _, p = stats.chisquare(counts.ravel())
    assert p > 0.01


def test_grass_weed_fraction_respected():
    spec = flat_spec(extent=(10.0, 10.0), weed_density=10.0, grass_weed_fraction=0.3, seed=31)
    truth = fieldgen.generate(spec)
    n_grass = sum(1 for p in truth.plants if p.species == "grass_weed")
    n_weedy = sum(1 for p in truth.plants if p.species != "crop")
    frac = n_grass / n_weedy
    assert abs(frac - 0.3) < 3 * math.sqrt(0.3 * 0.7 / n_weedy)


def test_generate_is_deterministic():
    spec = FieldSpec(extent=(5.0, 4.0), seed=41)
    a = fieldgen.generate(spec)
    b = fieldgen.generate(spec)
    assert np.array_equal(a.stems_xy(), b.stems_xy())
    assert [p.species for p in a.plants] == [p.species for p in b.plants]
    assert [p.radius for p in a.plants] == [p.radius for p in b.plants]
    assert np.array_equal(a.dem.altitudes, b.dem.altitudes)
    c = fieldgen.generate(FieldSpec(extent=(5.0, 4.0), seed=42))
    assert not np.array_equal(a.stems_xy(), c.stems_xy())


# ---------------------------------------------------------------------------
# render_grid


def test_render_soil_only_has_no_vegetation_signal():
    spec = flat_spec(extent=(2.0, 2.0), weed_density=0.0, seed=1)
    base = fieldgen.generate(spec)
    truth = FieldTruth(spec, base.row_theta, base.row_offsets, [], base.dem)
    grid = fieldgen.render_grid(truth, cell_size=0.1, noise_sigma=0.03, seed=2)
    # multiplicative noise is clipped at 3 sigma, so soil green stays bounded
    assert grid.layer("g").max() <= fieldgen.SOIL_RGB[1] * 1.09 + 1e-12
    assert grid.layer("exg").max() < 0.1


def test_single_plant_rasterization_matches_disc_oracle():
    spec = flat_spec(extent=(2.0, 2.0), weed_density=0.0, seed=1)
    base = fieldgen.generate(spec)
    plant = fieldgen.PlantInstance(0, np.array([1.0, 1.0, 0.0]), 0.25, "crop")
    truth = FieldTruth(spec, base.row_theta, base.row_offsets, [plant], base.dem)
    cs = 0.05
    grid = fieldgen.render_grid(truth, cell_size=cs, noise_sigma=0.0, seed=2)
    veg = grid.layer("exg") > 0.1
    centers = grid.cell_centers()
    inside = np.hypot(centers[..., 0] - 1.0, centers[..., 1] - 1.0) <= 0.25
    assert np.array_equal(veg, inside)
    expected = math.pi * 0.25**2 / cs**2
    boundary = 2 * math.pi * 0.25 / cs
    assert abs(veg.sum() - expected) <= boundary


def test_render_resolution_consistency():
    spec = flat_spec(extent=(4.0, 3.0), weed_density=0.5, seed=19)
    truth = fieldgen.generate(spec)
    areas = []
    for cs in (0.08, 0.04):
        grid = fieldgen.render_grid(truth, cell_size=cs, noise_sigma=0.0, seed=2)
        veg = grid.layer("exg") > 0.1
        areas.append(veg.sum() * cs * cs)
    assert abs(areas[0] - areas[1]) / areas[1] < 0.10


def test_render_height_layer_adds_canopy():
    spec = FieldSpec(
        extent=(3.0, 2.0),
        weed_density=0.0,
        terrain=TerrainParams(base_altitude=1.0, roughness_amplitude=0.0),
        seed=4,
    )
    truth = fieldgen.generate(spec)
    grid = fieldgen.render_grid(truth, cell_size=0.05, canopy_height=0.15, noise_sigma=0.0, seed=0)
    h = grid.layer("height")
    veg = grid.layer("exg") > 0.1
    assert np.allclose(h[veg], 1.15)
    assert np.allclose(h[~veg], 1.0)


def test_render_optional_spectral_bands():
    spec = flat_spec(extent=(2.0, 2.0), seed=6)
    truth = fieldgen.generate(spec)
    grid = fieldgen.render_grid(
        truth, cell_size=0.1, bands=("r", "g", "b", "nir", "red_edge"), noise_sigma=0.0, seed=0
    )
    veg = grid.layer("exg") > 0.1
    assert veg.any()
    # red-edge contrast: vegetation has high ndre, soil low
    assert grid.layer("ndre")[veg].min() > grid.layer("ndre")[~veg].max()


def test_render_is_deterministic(small_field):
    a = fieldgen.render_grid(small_field, cell_size=0.05, seed=8)
    b = fieldgen.render_grid(small_field, cell_size=0.05, seed=8)
    assert np.array_equal(a.layer("g"), b.layer("g"))
    c = fieldgen.render_grid(small_field, cell_size=0.05, seed=9)
    assert not np.array_equal(a.layer("g"), c.layer("g"))


# ---------------------------------------------------------------------------
# simulate_detections


def one_plant_truth(stem=(2.0, 0.3), radius=0.05, extent=(4.0, 0.6)):
    spec = flat_spec(extent=extent, weed_density=0.0, seed=1)
    base = fieldgen.generate(spec)
    plant = fieldgen.PlantInstance(7, np.array([*stem, 0.0]), radius, "weed")
    return FieldTruth(spec, base.row_theta, base.row_offsets, [plant], base.dem)


def test_zero_delay_event_times_match_crossing_oracle():
    truth = one_plant_truth()
    path = CameraPath(np.array([[0.0, 0.3], [4.0, 0.3]]), speed=0.5)
    params = DetectorParams(
        footprint_radius=0.5, delay_kind="constant", delay_params=(0.0,), obs_period=0.5, seed=2
    )
    events = fieldgen.simulate_detections(truth, path, params)
    # footprint reaches the stem at x = 1.5 (t = 3 s), leaves at x = 2.5 (t = 5 s)
    expect = [3.0 + 0.5 * k for k in range(5)]
    assert [e.timestamp for e in events] == pytest.approx(expect, abs=1e-9)
    assert all(e.delivery_delay == 0.0 for e in events)
    assert all(e.plant_id == 7 for e in events)


def test_oblique_pass_crossing_times():
    # stem 0.3 m off the track: chord half-length sqrt(0.5^2 - 0.3^2) = 0.4
    truth = one_plant_truth(stem=(2.0, 0.3))
    path = CameraPath(np.array([[0.0, 0.0], [4.0, 0.0]]), speed=1.0)
    params = DetectorParams(footprint_radius=0.5, obs_period=10.0, seed=2)
    events = fieldgen.simulate_detections(truth, path, params)
    assert len(events) == 1
    assert events[0].timestamp == pytest.approx(1.6, abs=1e-9)


def test_plant_outside_footprint_never_detected():
    truth = one_plant_truth(stem=(2.0, 0.3), extent=(4.0, 4.0))
    path = CameraPath(np.array([[0.0, 2.0], [4.0, 2.0]]), speed=1.0)
    params = DetectorParams(footprint_radius=0.5, seed=2)
    assert fieldgen.simulate_detections(truth, path, params) == []


def test_zero_confusion_labels_match_truth(small_field):
    path = CameraPath(np.array([[0.0, 2.0], [6.0, 2.0]]), speed=1.0)
    params = DetectorParams(footprint_radius=1.5, confusion=0.0, seed=3)
    events = fieldgen.simulate_detections(small_field, path, params)
    assert events
    by_id = {p.id: p.species for p in small_field.plants}
    assert all(e.raw_label == by_id[e.plant_id] for e in events)


def test_confusion_rate_matches_binomial_oracle():
    # one dense row of 1000 crops, each observed at least once
    spec = flat_spec(
        extent=(20.0, 0.6),
        crop_lattice=0.02,
        weed_density=0.0,
        lattice_jitter_sigma=0.0,
        seed=23,
    )
    truth = fieldgen.generate(spec)
    assert len(truth.plants) >= 990
    path = CameraPath(np.array([[0.0, 0.3], [20.0, 0.3]]), speed=2.0)
    params = DetectorParams(footprint_radius=0.4, confusion=0.2, obs_period=100.0, seed=5)
    events = fieldgen.simulate_detections(truth, path, params)
    first = {}
    for e in events:
        first.setdefault(e.plant_id, e)
    by_id = {p.id: p.species for p in truth.plants}
    n = len(first)
    assert n >= 990
    mis = sum(1 for e in first.values() if e.raw_label != by_id[e.plant_id])
    assert abs(mis / n - 0.2) < 0.03


def test_detection_stream_sorted_and_valid(small_field):
    path = CameraPath(np.array([[0.0, 1.0], [6.0, 1.0], [6.0, 3.0], [0.0, 3.0]]), speed=1.0)
    params = DetectorParams(
        footprint_radius=1.0, confusion=0.1, delay_kind="uniform", delay_params=(0.5, 3.0), seed=11
    )
    events = fieldgen.simulate_detections(small_field, path, params)
    keys = [(e.timestamp, e.plant_id) for e in events]
    assert keys == sorted(keys)
    for e in events:
        assert 0.5 <= e.delivery_delay <= 3.0
        assert 0.0 < e.label_confidence < 1.0
        assert e.measured_radius > 0


def test_detections_deterministic(small_field):
    path = CameraPath(np.array([[0.0, 2.0], [6.0, 2.0]]), speed=1.0)
    params = DetectorParams(footprint_radius=1.0, confusion=0.2, seed=7)
    a = fieldgen.simulate_detections(small_field, path, params)
    b = fieldgen.simulate_detections(small_field, path, params)
    assert len(a) == len(b)
    for ea, eb in zip(a, b):
        assert ea.timestamp == eb.timestamp
        assert np.array_equal(ea.measured_position, eb.measured_position)
        assert ea.raw_label == eb.raw_label


# ---------------------------------------------------------------------------
# export


def test_geojson_export_lists_rows_and_plants(tmp_path, small_field):
    import json

    out = tmp_path / "truth.json"
    fieldgen.export_truth_geojson(small_field, out)
    doc = json.loads(out.read_text())
    kinds = [f["geometry"]["type"] for f in doc["features"]]
    assert kinds.count("LineString") == len(small_field.row_offsets)
    assert kinds.count("Point") == len(small_field.plants)
    species = {
        f["properties"]["species"]
        for f in doc["features"]
        if f["properties"]["kind"] == "plant"
    }
    assert "crop" in species
