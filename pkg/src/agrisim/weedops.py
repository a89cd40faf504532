"""Weed validation, tool selection, trigger timing, and treatment simulation.

The treatment unit rides behind the detection cameras: weeds are tracked and
label-validated while the robot advances, a tool is picked by size, and the
firing instant is solved from the velocity profile so the tool meets the
plant. Treatment runs report per-tool success rates under pose noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ContractViolationError,
    InvalidSpecError,
    NotReachableError,
    OutOfReachError,
)
from .fieldgen import CROP, DetectionEvent, FieldTruth

STAMP = "stamp"
SPRAY = "spray"

# a weed wider than the stamp bolt cannot be covered by one stamp
DEFAULT_SIZE_THRESHOLD = 0.005


# ---------------------------------------------------------------------------
# tool bank

@dataclass(frozen=True)
class ToolRank:
    """One transverse rank of identical tools."""

    kind: str
    offset: float        # longitudinal gap behind the detection camera, m
    lateral: tuple       # tool positions across the driving direction, m
    radius: float        # coverage disc radius, m

    def __post_init__(self):
        if self.kind not in (STAMP, SPRAY):
            raise InvalidSpecError(f"unknown tool kind {self.kind!r}")
        if self.radius <= 0:
            raise InvalidSpecError("tool radius must be positive")
        if self.offset <= 0:
            raise InvalidSpecError("tool rank must sit behind the camera")
        lat = tuple(float(v) for v in self.lateral)
        if len(lat) == 0:
            raise InvalidSpecError("a tool rank needs at least one tool")
        if any(b <= a for a, b in zip(lat, lat[1:])):
            raise InvalidSpecError("tool lateral positions must increase")
        object.__setattr__(self, "lateral", lat)


@dataclass(frozen=True)
class ToolBank:
    """All tool ranks on the carrier plus the shared actuation latency."""

    ranks: tuple
    latency: float = 0.1

    def __post_init__(self):
        if self.latency < 0:
            raise InvalidSpecError("actuation latency cannot be negative")
        if not self.ranks:
            raise InvalidSpecError("tool bank has no ranks")
        object.__setattr__(self, "ranks", tuple(self.ranks))

    def ranks_for(self, kind: str) -> list:
        return [r for r in self.ranks if r.kind == kind]


def default_bank(latency: float = 0.1) -> ToolBank:
    """18 stamps in two staggered ranks and 9 spray nozzles in one rank."""
    stamps_front = ToolRank(
        STAMP, 0.50, tuple(-0.40 + 0.10 * i for i in range(9)), 0.005)
    stamps_rear = ToolRank(
        STAMP, 0.60, tuple(-0.35 + 0.10 * i for i in range(9)), 0.005)
    sprayers = ToolRank(
        SPRAY, 0.90, tuple(-0.40 + 0.10 * i for i in range(9)), 0.015)
    return ToolBank((stamps_front, stamps_rear, sprayers), latency)


# ---------------------------------------------------------------------------
# tracked weeds

@dataclass
class TrackedWeed:
    """A plant track in the robot frame: x forward of the camera, y lateral."""

    id: int
    position: np.ndarray
    stamp: float
    radius: float
    counts: dict = field(default_factory=dict)   # label -> observation count
    validated: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        if self.radius <= 0:
            raise InvalidSpecError("tracked radius must be positive")
        if any(c < 0 for c in self.counts.values()):
            raise InvalidSpecError("label counts cannot be negative")


def track_detections(events: list, profile, x_start: float, y_track: float,
                     now: float | None = None) -> list:
    """Fold detection events into per-plant tracks in the robot frame.

    The camera rides at x_start + distance(profile, t) along the track line
    y_track, so each event is expressed relative to the camera pose at its
    own timestamp. Only events delivered by `now` contribute; the newest
    position wins and labels accumulate.
    """
    tracks: dict[int, TrackedWeed] = {}
    order = sorted(events, key=lambda e: (e.timestamp + e.delivery_delay,
                                          e.plant_id))
    for ev in order:
        if now is not None and ev.timestamp + ev.delivery_delay > now:
            continue
        x_camera = x_start + distance_at_time(profile, ev.timestamp)
        rel = np.array([ev.measured_position[0] - x_camera,
                        ev.measured_position[1] - y_track])
        tr = tracks.get(ev.plant_id)
        if tr is None:
            tracks[ev.plant_id] = TrackedWeed(
                ev.plant_id, rel, ev.timestamp, ev.measured_radius,
                {ev.raw_label: 1})
        else:
            if ev.timestamp >= tr.stamp:
                tr.position = rel
                tr.stamp = ev.timestamp
                tr.radius = ev.measured_radius
            tr.counts[ev.raw_label] = tr.counts.get(ev.raw_label, 0) + 1
    return [tracks[k] for k in sorted(tracks)]


# ---------------------------------------------------------------------------
# naive Bayes label validation

DEFAULT_CONFUSION = ((0.9, 0.1), (0.1, 0.9))


def _split_counts(counts: dict) -> tuple[int, int]:
    n_crop = int(counts.get(CROP, 0))
    n_weed = int(sum(v for k, v in counts.items() if k != CROP))
    return n_crop, n_weed


def nbc_posterior(counts: dict, priors=(0.5, 0.5),
                  confusion=DEFAULT_CONFUSION) -> float:
    """P(weed | labels) under conditionally independent observations.

    Labels collapse to binary: anything not 'crop' is weed evidence.
    confusion[i][j] is P(observe class j | true class i), classes ordered
    (crop, weed).
    """
    n_crop, n_weed = _split_counts(counts)
    if n_crop + n_weed < 1:
        raise ContractViolationError("validation needs at least one label")
    c = np.asarray(confusion, dtype=float)
    p = np.asarray(priors, dtype=float)
    if c.shape != (2, 2) or np.any(c < 0) or np.any(c > 1) \
            or not np.allclose(c.sum(axis=1), 1.0):
        raise ContractViolationError("confusion must be a 2x2 row-stochastic matrix")
    if p.shape != (2,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0):
        raise ContractViolationError("priors must be a 2-class distribution")
    like_crop = p[0] * c[0, 0] ** n_crop * c[0, 1] ** n_weed
    like_weed = p[1] * c[1, 0] ** n_crop * c[1, 1] ** n_weed
    total = like_crop + like_weed
    if total == 0:
        raise ContractViolationError("observations impossible under the model")
    return float(like_weed / total)


def nbc_validate(weed: TrackedWeed, priors=(0.5, 0.5),
                 confusion=DEFAULT_CONFUSION, threshold: float = 0.5) -> bool:
    """Validate a track as weed iff the posterior strictly exceeds threshold."""
    return nbc_posterior(weed.counts, priors, confusion) > threshold


# ---------------------------------------------------------------------------
# tool selection and trigger timing

def select_tool(radius: float, bank: ToolBank,
                size_threshold: float = DEFAULT_SIZE_THRESHOLD) -> str:
    """Spray a weed at least as wide as the threshold, stamp a smaller one."""
    if radius <= 0:
        raise ContractViolationError("weed radius must be positive")
    return SPRAY if radius >= size_threshold else STAMP


def _segments(profile) -> list:
    """Normalize a velocity profile to (duration, speed) segments.

    A bare number means constant speed. The final segment's speed extends
    past its duration indefinitely.
    """
    if np.isscalar(profile):
        segs = [(math.inf, float(profile))]
    else:
        segs = [(float(d), float(v)) for d, v in profile]
    if not segs:
        raise ContractViolationError("empty velocity profile")
    for d, v in segs:
        if v <= 0:
            raise ContractViolationError("speed must stay positive")
        if d <= 0:
            raise ContractViolationError("segment durations must be positive")
    return segs


def time_to_distance(profile, distance: float) -> float:
    """Smallest t with integral of v over [0, t] equal to distance."""
    if distance < 0:
        raise ContractViolationError("distance cannot be negative")
    t = 0.0
    covered = 0.0
    segs = _segments(profile)
    for i, (dur, v) in enumerate(segs):
        gain = v * dur
        last = i == len(segs) - 1
        if covered + gain >= distance or last:
            return t + (distance - covered) / v
        covered += gain
        t += dur
    raise AssertionError("unreachable")


def distance_at_time(profile, t: float) -> float:
    """Integral of v over [0, t]."""
    if t < 0:
        raise ContractViolationError("time cannot be negative")
    covered = 0.0
    elapsed = 0.0
    segs = _segments(profile)
    for i, (dur, v) in enumerate(segs):
        if elapsed + dur >= t or i == len(segs) - 1:
            return covered + v * (t - elapsed)
        covered += v * dur
        elapsed += dur
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class TriggerCommand:
    kind: str
    tool_index: int          # unit index within the kind, rank-major
    fire_time: float         # absolute trigger instant, s
    expected_position: np.ndarray   # robot-frame weed position at fire time
    lateral: float           # selected tool lateral position, m
    rank_offset: float       # selected rank longitudinal offset, m

    def __post_init__(self):
        object.__setattr__(self, "expected_position",
                           np.asarray(self.expected_position,
                                      dtype=float).reshape(2))


def predict_trigger(weed: TrackedWeed, profile, bank: ToolBank,
                    size_threshold: float = DEFAULT_SIZE_THRESHOLD) -> TriggerCommand:
    """Pick the tool that will pass over the weed and solve its firing time.

    The robot advances along +x from the weed's timestamp onward following
    the velocity profile; the rank crosses the weed once the traveled
    distance equals the longitudinal gap. Firing leads the crossing by the
    actuation latency.
    """
    kind = select_tool(weed.radius, bank, size_threshold)
    best = None
    ahead = False
    base = 0
    for rank in bank.ranks_for(kind):
        gap = weed.position[0] + rank.offset
        if gap <= 0:
            base += len(rank.lateral)
            continue
        ahead = True
        lat = np.asarray(rank.lateral)
        idx = int(np.argmin(np.abs(lat - weed.position[1])))
        miss = abs(lat[idx] - weed.position[1])
        if miss <= rank.radius + weed.radius:
            if best is None or miss < best[0]:
                best = (miss, rank, base + idx, lat[idx], gap)
        base += len(rank.lateral)
    if not ahead:
        raise NotReachableError(
            f"track {weed.id} is already behind every {kind} rank")
    if best is None:
        raise OutOfReachError(
            f"track {weed.id} lies between {kind} tools; nearest miss too wide")
    _, rank, tool_index, lateral, gap = best

    t_cross = time_to_distance(profile, gap)
    fire_rel = t_cross - bank.latency
    if fire_rel < 0:
        raise NotReachableError(
            f"track {weed.id} crosses the {kind} rank inside the latency window")
    expected = np.array([
        weed.position[0] - distance_at_time(profile, fire_rel),
        weed.position[1],
    ])
    return TriggerCommand(kind, tool_index, weed.stamp + fire_rel,
                          expected, float(lateral), rank.offset)


# ---------------------------------------------------------------------------
# treatment simulation

@dataclass(frozen=True)
class RobotRun:
    """One straight pass along +x at constant speed."""

    y_track: float = 5.0       # lateral position of the carrier centerline, m
    x_start: float = -1.0      # camera x at t=0, m
    speed: float = 0.2
    roughness: float = 0.0     # pose perturbation sigma, m
    seed: int = 0

    def __post_init__(self):
        if self.speed <= 0:
            raise InvalidSpecError("run speed must be positive")
        if self.roughness < 0:
            raise InvalidSpecError("roughness cannot be negative")


@dataclass(frozen=True)
class TreatmentConfig:
    size_threshold: float = DEFAULT_SIZE_THRESHOLD
    nbc_threshold: float = 0.5
    priors: tuple = (0.5, 0.5)
    confusion: tuple = DEFAULT_CONFUSION
    compensate_latency: bool = True
    vertical_gain: float = 0.5      # share of roughness acting vertically
    vertical_tolerance: float = 0.02  # max vertical offset that still contacts


@dataclass
class TreatmentMetrics:
    attempted: dict
    treated: dict
    crop_casualties: int
    skipped_out_of_reach: int
    skipped_not_reachable: int
    commands: list

    def rate(self, kind: str) -> float:
        n = self.attempted.get(kind, 0)
        return self.treated.get(kind, 0) / n if n else float("nan")


_SALT_POSE_NOISE = 9100


def simulate_treatment(truth: FieldTruth, detections: list, run: RobotRun,
                       bank: ToolBank | None = None,
                       cfg: TreatmentConfig | None = None) -> TreatmentMetrics:
    """Drive one pass and fire on every validated track; score against truth.

    A fired tool treats its target iff the coverage disc still overlaps the
    true stem after pose noise spends part of the margin: roughness draws a
    per-plant perturbation whose lateral magnitude shrinks the effective
    overlap and whose vertical magnitude must stay under the contact
    tolerance. Scaling the same draws by a larger roughness can therefore
    only lose contacts, never gain them.
    """
    bank = bank if bank is not None else default_bank()
    cfg = cfg if cfg is not None else TreatmentConfig()

    tracks = track_detections(detections, run.speed, run.x_start, run.y_track)
    plants = {p.id: p for p in truth.plants}
    crop_xy = np.array([p.stem[:2] for p in truth.plants if p.species == CROP])
    crop_tree = cKDTree(crop_xy) if len(crop_xy) else None
    crop_ids = [p.id for p in truth.plants if p.species == CROP]
    crop_r = np.array([plants[i].radius for i in crop_ids])

    attempted: dict[str, int] = {STAMP: 0, SPRAY: 0}
    treated: dict[str, int] = {STAMP: 0, SPRAY: 0}
    casualties = 0
    out_of_reach = 0
    not_reachable = 0
    commands = []

    for tr in tracks:
        if not nbc_validate(tr, cfg.priors, cfg.confusion, cfg.nbc_threshold):
            continue
        tr.validated = True
        try:
            cmd = predict_trigger(tr, run.speed, bank, cfg.size_threshold)
        except OutOfReachError:
            out_of_reach += 1
            continue
        except NotReachableError:
            not_reachable += 1
            continue
        commands.append(cmd)
        attempted[cmd.kind] += 1

        # impact: compensated fire leads the crossing by the latency, so the
        # tool meets the planned point; uncompensated fire lands late
        fire = cmd.fire_time if cfg.compensate_latency \
            else cmd.fire_time + bank.latency
        t_impact = fire + bank.latency
        impact = np.array([
            run.x_start + distance_at_time(run.speed, t_impact) - cmd.rank_offset,
            run.y_track + cmd.lateral,
        ])

        rngp = np.random.default_rng([run.seed, _SALT_POSE_NOISE, tr.id])
        u_lat, u_vert = rngp.standard_normal(2)
        lateral_spend = run.roughness * abs(u_lat)
        vertical_err = run.roughness * cfg.vertical_gain * abs(u_vert)

        plant = plants.get(tr.id)
        if plant is not None:
            radius = next(r.radius for r in bank.ranks_for(cmd.kind)
                          if r.offset == cmd.rank_offset)
            miss = float(np.hypot(*(impact - plant.stem[:2])))
            hit = (miss + lateral_spend <= radius + plant.radius
                   and vertical_err <= cfg.vertical_tolerance)
            if hit:
                treated[cmd.kind] += 1
                if plant.species == CROP:
                    casualties += 1
            if hit and crop_tree is not None and plant.species != CROP:
                near = crop_tree.query_ball_point(impact, radius + crop_r.max())
                for k in near:
                    if np.hypot(*(impact - crop_xy[k])) <= radius + crop_r[k]:
                        casualties += 1

    return TreatmentMetrics(attempted, treated, casualties,
                            out_of_reach, not_reachable, commands)
