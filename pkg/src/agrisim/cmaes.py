"""Covariance matrix adaptation evolution strategy, (mu/mu_w, lambda) variant.

Derivative-free minimizer used by the path planner to polish waypoint
vectors. Standard update equations: rank-based recombination weights,
cumulative step-size adaptation, and rank-one plus rank-mu covariance
updates. Deterministic under the seed; the incumbent (best-so-far) never
worsens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError

__all__ = ["CmaesResult", "cmaes_minimize"]


@dataclass
class CmaesResult:
    x: np.ndarray            # best point seen
    fun: float               # objective at x
    evaluations: int
    generations: int
    best_history: list[float] = field(default_factory=list)  # best-so-far per eval
    converged: bool = False


def _default_population(dim: int) -> int:
    return 4 + int(3 * math.log(dim))


def cmaes_minimize(
    f,
    x0,
    sigma0: float,
    population: int | None = None,
    max_evals: int = 10000,
    seed: int = 0,
    f_target: float = -math.inf,
) -> CmaesResult:
    """Minimize ``f`` starting from ``x0`` with initial step size ``sigma0``.

    Stops when ``max_evals`` objective calls are spent, ``f_target`` is
    reached, or the step size collapses.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    if n < 1:
        raise ContractViolationError("dimension must be at least 1")
    if sigma0 <= 0:
        raise ContractViolationError("sigma0 must be positive")
    lam = _default_population(n) if population is None else int(population)
    if lam < 2:
        raise ContractViolationError("population must be at least 2")
    if max_evals < lam:
        raise ContractViolationError("max_evals must cover one generation")

    mu = lam // 2
    raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / float(weights @ weights)

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    mean = x0.copy()
    sigma = float(sigma0)
    C = np.eye(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)

    best_x = mean.copy()
    best_f = float(f(best_x))
    evals = 1
    history = [best_f]
    rng = np.random.default_rng(seed)
    gen = 0
    converged = best_f <= f_target

    while evals + lam <= max_evals and not converged:
        gen += 1
        # eigendecomposition each generation; dimensions here are small
        eigvals, B = np.linalg.eigh(C)
        eigvals = np.maximum(eigvals, 1e-20)
        D = np.sqrt(eigvals)

        z = rng.standard_normal((lam, n))
        y = z * D @ B.T                    # y_k = B D z_k
        xs = mean + sigma * y
        fs = np.empty(lam)
        for k in range(lam):
            fs[k] = float(f(xs[k]))
            evals += 1
            if fs[k] < best_f:
                best_f = fs[k]
                best_x = xs[k].copy()
            history.append(best_f)
            if best_f <= f_target:
                converged = True

        order = np.argsort(fs, kind="stable")
        sel = order[:mu]
        y_w = weights @ y[sel]
        mean = mean + sigma * y_w

        # step-size path uses C^(-1/2) y_w = B D^-1 B^T y_w
        c_inv_half_y = B @ ((B.T @ y_w) / D)
        p_sigma = (1.0 - c_sigma) * p_sigma + math.sqrt(
            c_sigma * (2.0 - c_sigma) * mu_eff
        ) * c_inv_half_y
        h_sigma = float(
            np.linalg.norm(p_sigma)
            / math.sqrt(1.0 - (1.0 - c_sigma) ** (2.0 * gen))
            < (1.4 + 2.0 / (n + 1.0)) * chi_n
        )
        p_c = (1.0 - c_c) * p_c + h_sigma * math.sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w

        delta_h = (1.0 - h_sigma) * c_c * (2.0 - c_c)
        rank_mu = (y[sel] * weights[:, None]).T @ y[sel]
        C = (
            (1.0 - c_1 - c_mu) * C
            + c_1 * (np.outer(p_c, p_c) + delta_h * C)
            + c_mu * rank_mu
        )
        C = (C + C.T) / 2.0

        sigma *= math.exp((c_sigma / d_sigma) * (np.linalg.norm(p_sigma) / chi_n - 1.0))
        if sigma < 1e-16 * sigma0:
            break

    return CmaesResult(best_x, best_f, evals, gen, history, converged)
