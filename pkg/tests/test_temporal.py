"""Stem constellation descriptors and cross-session similarity recovery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agrisim.errors import ContractViolationError, InsufficientStructureError
from agrisim.scenario import build_temporal_scenario
from agrisim.temporal import (
    Similarity2D,
    temporal_descriptor,
    temporal_match,
)


def _stems(seed, n=60):
    return np.random.default_rng(seed).uniform(0, 10, (n, 2))


# ---------------------------------------------------------------------------
# descriptor invariances

def test_descriptor_power_of_two_scale_is_exact():
    stems = _stems(7)
    a = temporal_descriptor(stems, 12)
    b = temporal_descriptor(stems * 4.0, 12)
    assert np.array_equal(a, b)


@given(seed=st.integers(0, 300), scale=st.floats(0.2, 5.0),
       angle=st.floats(-np.pi, np.pi))
@settings(max_examples=40, deadline=None)
def test_descriptor_similarity_invariant(seed, scale, angle):
    stems = _stems(seed, n=40)
    rot = np.array([[np.cos(angle), -np.sin(angle)],
                    [np.sin(angle), np.cos(angle)]])
    moved = scale * stems @ rot.T + np.array([3.0, -2.0])
    a = temporal_descriptor(stems, 5)
    b = temporal_descriptor(moved, 5)
    assert np.max(np.abs(a - b)) < 1e-9


def test_descriptor_length_is_two_k():
    stems = _stems(1)
    assert temporal_descriptor(stems, 0, k=4).shape == (8,)
    assert temporal_descriptor(stems, 0, k=6).shape == (12,)


def test_descriptor_validation():
    stems = _stems(1, n=10)
    with pytest.raises(ContractViolationError):
        temporal_descriptor(stems, 0, k=1)
    with pytest.raises(ContractViolationError):
        temporal_descriptor(stems, 10)
    with pytest.raises(InsufficientStructureError):
        temporal_descriptor(stems[:5], 0, k=6)


# ---------------------------------------------------------------------------
# Similarity2D

def test_similarity_apply_matches_matrix_form():
    sim = Similarity2D(1.3, np.radians(20.0), np.array([2.0, -1.0]))
    pts = _stems(3, n=25)
    manual = 1.3 * pts @ sim.rotation.T + np.array([2.0, -1.0])
    assert np.allclose(sim.apply(pts), manual)


# ---------------------------------------------------------------------------
# temporal_match

def test_match_identical_sessions():
    stems = _stems(7)
    m = temporal_match(stems, stems.copy())
    assert len(m.pairs) == len(stems)
    assert all(i == j for i, j in m.pairs)
    assert m.transform.scale == pytest.approx(1.0, abs=1e-9)
    assert np.max(m.residuals) < 1e-9


def test_match_recovers_planted_similarity():
    sc = build_temporal_scenario(0)
    m = temporal_match(sc.stems_t0, sc.stems_t1)
    surviving = (sc.truth_map >= 0).sum()
    correct = sum(1 for i, j in m.pairs if sc.truth_map[i] == j)
    assert correct / surviving >= 0.8
    assert m.transform.scale == pytest.approx(sc.transform.scale, abs=0.02)
    assert m.transform.angle == pytest.approx(sc.transform.angle, abs=0.02)
    assert np.allclose(m.transform.t, sc.transform.t, atol=0.05)


def test_match_correctness_across_seeds():
    for seed in (1, 2, 3):
        sc = build_temporal_scenario(seed)
        m = temporal_match(sc.stems_t0, sc.stems_t1)
        surviving = (sc.truth_map >= 0).sum()
        correct = sum(1 for i, j in m.pairs if sc.truth_map[i] == j)
        assert correct / surviving >= 0.8
        assert abs(m.transform.scale - sc.transform.scale) <= 0.02


def test_match_residuals_reflect_detection_noise():
    sc = build_temporal_scenario(4, noise_sigma=0.01)
    m = temporal_match(sc.stems_t0, sc.stems_t1)
    # residual magnitude tracks the planted jitter, not the stem spacing
    assert np.median(m.residuals) < 0.05


def test_match_too_few_stems_raises():
    stems = _stems(2, n=4)
    with pytest.raises(InsufficientStructureError):
        temporal_match(stems, stems)


def test_match_ratio_threshold_validation():
    stems = _stems(2)
    with pytest.raises(ContractViolationError):
        temporal_match(stems, stems, ratio_threshold=0.0)
    with pytest.raises(ContractViolationError):
        temporal_match(stems, stems, ratio_threshold=1.5)
