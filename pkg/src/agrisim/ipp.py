"""Gaussian-process terrain belief and informative path planning.

A dense GP posterior over a grid of cell centers is updated by recursive
Bayesian fusion of altitude-dependent camera observations: flying low gives
few accurate cells, flying high gives many noisy ones. The planner chooses
measurement sites by maximizing trace reduction per mission second, seeding
a coarse greedy grid search and polishing it with CMA-ES; a boustrophedon
lawnmower sweep is the non-adaptive baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cmaes import cmaes_minimize
from .errors import (
    ContractViolationError,
    ExhaustedWorkspaceError,
    InvalidObservationError,
)

__all__ = [
    "GpHyper",
    "TerrainBelief",
    "SensorModel",
    "Measurement",
    "PlanState",
    "ReplanConfig",
    "init_belief",
    "observe",
    "fuse",
    "utility",
    "plan_lawnmower",
    "replan",
    "run_mission",
    "cmaes_minimize",
]


@dataclass(frozen=True)
class GpHyper:
    signal_variance: float = 1.0
    length_scale: float = 3.0
    # extra measurement-noise floor added on top of the sensor model
    noise_floor: float = 0.0


@dataclass
class TerrainBelief:
    cells: np.ndarray            # (n, 2) cell centers
    shape: tuple[int, int]       # rows, cols
    resolution: float
    mean: np.ndarray             # (n,)
    cov: np.ndarray              # (n, n)
    hyper: GpHyper

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.cov))

    def copy(self) -> "TerrainBelief":
        return TerrainBelief(self.cells, self.shape, self.resolution,
                             self.mean.copy(), self.cov.copy(), self.hyper)


@dataclass(frozen=True)
class SensorModel:
    half_fov: float = math.radians(30.0)   # half field-of-view angle
    noise_a: float = 0.01                  # variance floor
    noise_b: float = 0.04                  # altitude-squared coefficient
    min_altitude: float = 1.0
    max_altitude: float = 30.0

    def __post_init__(self):
        if self.noise_a <= 0 or self.noise_b < 0:
            raise ContractViolationError("sensor noise model needs a > 0, b >= 0")
        if not 0 < self.half_fov < math.pi / 2:
            raise ContractViolationError("half_fov must be in (0, pi/2)")

    def footprint_side(self, h: float) -> float:
        return 2.0 * h * math.tan(self.half_fov)

    def noise_variance(self, h: float) -> float:
        return self.noise_a + self.noise_b * h * h


@dataclass
class Measurement:
    cell_indices: np.ndarray   # (m,) int
    values: np.ndarray         # (m,)
    variance: float


@dataclass
class PlanState:
    pose: np.ndarray                      # (3,) x, y, altitude
    budget: float                         # seconds remaining
    waypoints: list = field(default_factory=list)  # 3-D measurement sites
    speed: float = 2.0
    dwell: float = 1.0                    # hover time per measurement site

    def travel_time(self) -> float:
        """Time to fly from the current pose through every waypoint."""
        t, prev = 0.0, np.asarray(self.pose, dtype=float)
        for wp in self.waypoints:
            wp = np.asarray(wp, dtype=float)
            t += float(np.linalg.norm(wp - prev)) / self.speed + self.dwell
            prev = wp
        return t


def init_belief(extent, resolution: float, prior_mean: float = 0.0,
                hyper: GpHyper = GpHyper()) -> TerrainBelief:
    """Prior belief over a grid of cell centers covering ``extent`` meters.

    The covariance is the full kernel matrix, so trace(P) = n * signal
    variance and nearby cells start strongly correlated.
    """
    if resolution <= 0:
        raise ContractViolationError("resolution must be positive")
    w, h = float(extent[0]), float(extent[1])
    cols = max(1, int(round(w / resolution)))
    rows = max(1, int(round(h / resolution)))
    xs = (np.arange(cols) + 0.5) * resolution
    ys = (np.arange(rows) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    d2 = np.sum((cells[:, None, :] - cells[None, :, :]) ** 2, axis=2)
    cov = hyper.signal_variance * np.exp(-d2 / (2.0 * hyper.length_scale**2))
    mean = np.full(cells.shape[0], float(prior_mean))
    return TerrainBelief(cells, (rows, cols), resolution, mean, cov, hyper)


def footprint_cells(belief: TerrainBelief, pose, sensor: SensorModel) -> np.ndarray:
    """Indices of cells whose centers fall inside the square footprint."""
    x, y, h = float(pose[0]), float(pose[1]), float(pose[2])
    half = sensor.footprint_side(h) / 2.0
    inside = (np.abs(belief.cells[:, 0] - x) <= half) & (
        np.abs(belief.cells[:, 1] - y) <= half
    )
    return np.nonzero(inside)[0]


def observe(belief: TerrainBelief, pose, sensor: SensorModel, world, rng) -> Measurement:
    """Simulate one camera observation from ``pose``.

    ``world`` maps (x, y) to the true value of the mapped quantity. Every
    cell center inside the footprint is measured with i.i.d. Gaussian noise
    of variance sigma^2(h).
    """
    h = float(pose[2])
    if not sensor.min_altitude <= h <= sensor.max_altitude:
        raise InvalidObservationError(
            f"altitude {h} outside [{sensor.min_altitude}, {sensor.max_altitude}]"
        )
    idx = footprint_cells(belief, pose, sensor)
    var = sensor.noise_variance(h)
    truth = np.array([float(world(cx, cy)) for cx, cy in belief.cells[idx]])
    values = truth + rng.normal(0.0, math.sqrt(var), idx.size)
    return Measurement(idx, values, var)


def fuse(belief: TerrainBelief, meas: Measurement) -> TerrainBelief:
    """Condition the belief on one measurement (exact Gaussian update)."""
    idx = np.asarray(meas.cell_indices, dtype=int)
    z = np.asarray(meas.values, dtype=float)
    if idx.shape != z.shape:
        raise ContractViolationError("measurement cells and values differ in length")
    if idx.size == 0:
        return belief.copy()
    if idx.min() < 0 or idx.max() >= belief.n:
        raise ContractViolationError("measurement references unknown cells")
    if np.unique(idx).size != idx.size:
        raise ContractViolationError("duplicate cells in one measurement")

    noise = meas.variance + belief.hyper.noise_floor
    P = belief.cov
    PH = P[:, idx]                                   # (n, m)
    S = PH[idx, :] + noise * np.eye(idx.size)        # (m, m)
    gain = np.linalg.solve(S, PH.T).T                # (n, m) = P H^T S^-1
    mean = belief.mean + gain @ (z - belief.mean[idx])
    cov = P - gain @ PH.T
    cov = (cov + cov.T) / 2.0
    return TerrainBelief(belief.cells, belief.shape, belief.resolution,
                         mean, cov, belief.hyper)


def _weighted_trace_drop(belief: TerrainBelief, site_cells: list, noises: list,
                         weights=None) -> float:
    """Trace reduction from fusing the given measurement sites in order.

    Covariance updates do not depend on measured values, so the reduction is
    computable ahead of flight. Uses a low-rank downdate: after k sites the
    posterior is P - U U^T where U stacks whitened gain columns, so only the
    touched columns of P are ever formed.
    """
    P = belief.cov
    U = None                     # (n, r) accumulated downdate factor
    drop = 0.0
    for idx, noise in zip(site_cells, noises):
        if idx.size == 0:
            continue
        B = P[:, idx] if U is None else P[:, idx] - U @ U[idx, :].T
        S = B[idx, :] + noise * np.eye(idx.size)
        L = np.linalg.cholesky(S)
        cols = np.linalg.solve(L, B.T).T             # B L^-T, (n, m)
        if weights is None:
            drop += float(np.sum(cols * cols))
        else:
            drop += float(weights @ np.sum(cols * cols, axis=1))
        U = cols if U is None else np.hstack([U, cols])
    return drop


def utility(belief: TerrainBelief, waypoints, sensor: SensorModel, state: PlanState,
            weights=None) -> float:
    """Expected weighted trace reduction per second of mission time."""
    wps = [np.asarray(w, dtype=float) for w in waypoints]
    if not wps:
        return 0.0
    sites = [footprint_cells(belief, w, sensor) for w in wps]
    noises = [sensor.noise_variance(float(w[2])) + belief.hyper.noise_floor
              for w in wps]
    drop = _weighted_trace_drop(belief, sites, noises, weights)
    t = replace(state, waypoints=wps).travel_time()
    return drop / t


def _lanes(length: float, spacing: float) -> np.ndarray:
    """Lane centers spacing/2, 3*spacing/2, ... plus a final lane hugging the
    far edge, so every coordinate sits within spacing/2 of some lane."""
    xs = list(np.arange(spacing / 2.0, length, spacing))
    if not xs:
        xs = [length / 2.0]
    elif xs[-1] < length - spacing / 2.0:
        xs.append(length - spacing / 2.0)
    return np.array(xs)


def plan_lawnmower(extent, altitude: float, spacing: float, state: PlanState) -> PlanState:
    """Boustrophedon sweep at fixed altitude, truncated at the budget."""
    if spacing <= 0:
        raise ContractViolationError("spacing must be positive")
    w, h = float(extent[0]), float(extent[1])
    xs = _lanes(w, spacing)
    ys = _lanes(h, spacing)
    sites = []
    for row, y in enumerate(ys):
        lane = [np.array([x, y, altitude]) for x in xs]
        if row % 2 == 1:
            lane.reverse()
        sites.extend(lane)

    kept = []
    t, prev = 0.0, np.asarray(state.pose, dtype=float)
    for wp in sites:
        t += float(np.linalg.norm(wp - prev)) / state.speed + state.dwell
        if t > state.budget:
            break
        kept.append(wp)
        prev = wp
    return replace(state, waypoints=kept)


@dataclass(frozen=True)
class ReplanConfig:
    workspace: tuple = (0.0, 30.0, 0.0, 30.0)   # xmin, xmax, ymin, ymax
    altitudes: tuple = (2.0, 6.0, 12.0)          # coarse candidate altitudes
    grid_step: float = 6.0                       # coarse lattice spacing
    horizon: int = 3                             # waypoints per plan
    cmaes_evals: int = 60
    cmaes_sigma: float = 1.5
    cmaes_population: int | None = None


def _lattice(cfg: ReplanConfig):
    xmin, xmax, ymin, ymax = cfg.workspace
    xs = np.arange(xmin + cfg.grid_step / 2.0, xmax, cfg.grid_step)
    ys = np.arange(ymin + cfg.grid_step / 2.0, ymax, cfg.grid_step)
    return [np.array([x, y, a]) for a in cfg.altitudes for y in ys for x in xs]


def replan(belief: TerrainBelief, state: PlanState, sensor: SensorModel,
           cfg: ReplanConfig, seed: int = 0, weights=None) -> PlanState:
    """Pick the next measurement sites: greedy grid search, then CMA-ES.

    The grid stage appends, one at a time, the lattice point that maximizes
    plan utility. CMA-ES then optimizes the stacked waypoint vector with the
    grid plan as its incumbent, so the returned plan is never worse.
    """
    if state.budget <= 0:
        raise ContractViolationError("cannot replan with no budget")
    candidates = [
        c for c in _lattice(cfg)
        if sensor.min_altitude <= c[2] <= sensor.max_altitude
    ]
    feasible = [
        c for c in candidates
        if replace(state, waypoints=[c]).travel_time() <= state.budget
    ]
    if not feasible:
        raise ExhaustedWorkspaceError("no lattice waypoint reachable within budget")

    # greedy stage, incremental: the downdate factor U accumulated from the
    # chosen prefix lets each candidate be scored with one site evaluation
    # instead of re-simulating the whole chain
    cand_cells = [footprint_cells(belief, c, sensor) for c in feasible]
    cand_noise = [sensor.noise_variance(float(c[2])) + belief.hyper.noise_floor
                  for c in feasible]
    P = belief.cov
    plan: list[np.ndarray] = []
    U = None
    drop_so_far = 0.0
    for _ in range(cfg.horizon):
        best = None
        for ci, c in enumerate(feasible):
            trial_time = replace(state, waypoints=plan + [c]).travel_time()
            if trial_time > state.budget:
                continue
            idx = cand_cells[ci]
            if idx.size == 0:
                continue
            B = P[:, idx] if U is None else P[:, idx] - U @ U[idx, :].T
            S = B[idx, :] + cand_noise[ci] * np.eye(idx.size)
            L = np.linalg.cholesky(S)
            cols = np.linalg.solve(L, B.T).T
            if weights is None:
                gain = float(np.sum(cols * cols))
            else:
                gain = float(weights @ np.sum(cols * cols, axis=1))
            u = (drop_so_far + gain) / trial_time
            if best is None or u > best[0]:
                best = (u, c, cols, gain)
        if best is None:
            break
        _, c, cols, gain = best
        plan.append(c)
        drop_so_far += gain
        U = cols if U is None else np.hstack([U, cols])
    if not plan:
        raise ExhaustedWorkspaceError("no feasible plan within budget")
    if cfg.cmaes_evals <= 0:
        return replace(state, waypoints=plan)

    xmin, xmax, ymin, ymax = cfg.workspace
    lo = np.array([xmin, ymin, sensor.min_altitude])
    hi = np.array([xmax, ymax, sensor.max_altitude])

    def objective(vec: np.ndarray) -> float:
        wps = vec.reshape(-1, 3)
        penalty = float(np.sum(np.maximum(lo - wps, 0.0) ** 2)
                        + np.sum(np.maximum(wps - hi, 0.0) ** 2))
        clipped = np.clip(wps, lo, hi)
        if replace(state, waypoints=list(clipped)).travel_time() > state.budget:
            return 1e6 + penalty
        return -utility(belief, list(clipped), sensor, state, weights) + penalty

    x0 = np.concatenate(plan)
    res = cmaes_minimize(objective, x0, cfg.cmaes_sigma,
                         population=cfg.cmaes_population,
                         max_evals=cfg.cmaes_evals, seed=seed)
    polished = [np.clip(w, lo, hi) for w in res.x.reshape(-1, 3)]
    if replace(state, waypoints=polished).travel_time() > state.budget:
        polished = plan
    return replace(state, waypoints=polished)


@dataclass
class MissionLog:
    belief: TerrainBelief
    trajectory: list          # measurement poses in visit order
    trace_history: list       # (time s, trace) after each fusion
    final_trace: float


def run_mission(world, sensor: SensorModel, planner: str, budget: float,
                seed: int, extent=(30.0, 30.0), resolution: float = 1.0,
                prior_mean: float = 0.0, hyper: GpHyper = GpHyper(),
                start=(0.0, 0.0, 6.0), speed: float = 2.0, dwell: float = 1.0,
                lawnmower_altitude: float = 6.0, lawnmower_spacing: float = 6.0,
                replan_cfg: ReplanConfig | None = None,
                weights=None) -> MissionLog:
    """Fly one mapping mission and return the final belief and trace log."""
    if planner not in ("cmaes", "lawnmower"):
        raise ContractViolationError(f"unknown planner {planner!r}")
    belief = init_belief(extent, resolution, prior_mean, hyper)
    rng = np.random.default_rng([seed, 17])
    state = PlanState(np.asarray(start, dtype=float), float(budget),
                      speed=speed, dwell=dwell)
    trace_log = [(0.0, belief.trace())]
    visited = []
    elapsed = 0.0
    replan_round = 0

    if planner == "lawnmower":
        queue = list(plan_lawnmower(extent, lawnmower_altitude,
                                    lawnmower_spacing, state).waypoints)
    else:
        cfg = replan_cfg or ReplanConfig(
            workspace=(0.0, float(extent[0]), 0.0, float(extent[1])))
        queue = []

    while True:
        if not queue:
            if planner == "lawnmower":
                break
            if state.budget <= 0:
                break
            try:
                queue = list(replan(belief, state, sensor, cfg,
                                    seed=seed * 1000 + replan_round,
                                    weights=weights).waypoints)
            except ExhaustedWorkspaceError:
                break
            replan_round += 1
            if not queue:
                break
        wp = queue.pop(0)
        hop = float(np.linalg.norm(wp - state.pose)) / state.speed + state.dwell
        if hop > state.budget:
            break
        elapsed += hop
        state = replace(state, pose=wp, budget=state.budget - hop)
        meas = observe(belief, wp, sensor, world, rng)
        belief = fuse(belief, meas)
        visited.append(wp.copy())
        trace_log.append((elapsed, belief.trace()))

    return MissionLog(belief, visited, trace_log, belief.trace())
