"""CMA-ES benchmark convergence, monotonicity, and determinism."""

import numpy as np
import pytest

from agrisim.cmaes import cmaes_minimize
from agrisim.errors import ContractViolationError

SPHERE_TARGET = np.array([0.3, -0.5, 1.0, 0.0, -1.2, 0.7])


def sphere(x):
    return float(np.sum((x - SPHERE_TARGET) ** 2))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


def test_sphere_dim6_converges_within_budget():
    res = cmaes_minimize(sphere, np.zeros(6), 0.5, max_evals=3000, seed=0,
                         f_target=1e-6)
    assert res.fun < 1e-6
    assert res.evaluations <= 3000
    assert np.allclose(res.x, SPHERE_TARGET, atol=1e-2)


def test_rosenbrock_dim4_converges_within_budget():
    res = cmaes_minimize(rosenbrock, np.zeros(4), 0.3, max_evals=20000, seed=0,
                         f_target=1e-3)
    assert res.fun < 1e-3
    assert res.evaluations <= 20000


def test_best_so_far_monotone_and_tracks_evals():
    res = cmaes_minimize(rosenbrock, np.zeros(4), 0.3, max_evals=2000, seed=3)
    assert len(res.best_history) == res.evaluations
    hist = np.array(res.best_history)
    assert np.all(np.diff(hist) <= 0.0)
    assert hist[-1] == res.fun


def test_deterministic_under_seed():
    a = cmaes_minimize(sphere, np.zeros(6), 0.5, max_evals=400, seed=11)
    b = cmaes_minimize(sphere, np.zeros(6), 0.5, max_evals=400, seed=11)
    assert a.fun == b.fun
    assert np.array_equal(a.x, b.x)
    assert a.best_history == b.best_history
    c = cmaes_minimize(sphere, np.zeros(6), 0.5, max_evals=400, seed=12)
    assert c.fun != a.fun


def test_population_one_rejected():
    with pytest.raises(ContractViolationError):
        cmaes_minimize(sphere, np.zeros(6), 0.5, population=1, max_evals=100)


def test_parameter_validation():
    with pytest.raises(ContractViolationError):
        cmaes_minimize(sphere, np.zeros(6), 0.0, max_evals=100)
    with pytest.raises(ContractViolationError):
        cmaes_minimize(sphere, np.zeros(6), 0.5, max_evals=3)  # below one generation
    with pytest.raises(ContractViolationError):
        cmaes_minimize(sphere, np.array([]), 0.5, max_evals=100)


def test_incumbent_includes_start_point():
    # x0 is evaluated first, so the result can never be worse than f(x0)
    res = cmaes_minimize(sphere, SPHERE_TARGET, 2.0, max_evals=50, seed=0)
    assert res.fun <= sphere(SPHERE_TARGET) + 1e-18
    assert res.best_history[0] == pytest.approx(sphere(SPHERE_TARGET))
