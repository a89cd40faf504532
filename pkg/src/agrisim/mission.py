"""UAV-UGV coordination: lossy-link protocol, task scheduling, missions.

Two robots share a thin message set over a dropping, delaying radio link.
Poses and areas of interest are fire-and-forget; requests and status
replies retransmit until answered. A small task tree runs each robot, and
coordinated_mission wires survey, notification, navigation, and treatment
into one simulated run with an ordered event log.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import ipp, weedops
from .errors import (
    ContractViolationError,
    InvalidSpecError,
    StructuralError,
)
from .fieldgen import CameraPath, DetectorParams, FieldTruth, simulate_detections

# ---------------------------------------------------------------------------
# messages

STATUS_STATES = ("received", "running", "succeeded", "failed")


@dataclass(frozen=True)
class UavPose:
    pose: tuple          # (x, y, z)
    stamp: float


@dataclass(frozen=True)
class UgvPose:
    pose: tuple          # (x, y, heading)
    stamp: float


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_cross(a, b, c, d) -> bool:
    """True when open segments ab and cd intersect (shared endpoints ok)."""
    d1 = _orient(c, d, a)
    d2 = _orient(c, d, b)
    d3 = _orient(a, b, c)
    d4 = _orient(a, b, d)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    return False


@dataclass(frozen=True)
class AreaOfInterest:
    id: int
    polygon: tuple       # ((x, y), ...) simple polygon vertices in order
    pressure: float

    def __post_init__(self):
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        if len(poly) < 3:
            raise InvalidSpecError("area polygon needs at least three vertices")
        if self.pressure < 0:
            raise InvalidSpecError("weed pressure cannot be negative")
        n = len(poly)
        for i in range(n):
            for j in range(i + 1, n):
                # adjacent edges share an endpoint; skip them and the wrap pair
                if j == i or j == (i + 1) % n or (j + 1) % n == i:
                    continue
                if _segments_cross(poly[i], poly[(i + 1) % n],
                                   poly[j], poly[(j + 1) % n]):
                    raise InvalidSpecError("area polygon self-intersects")
        object.__setattr__(self, "polygon", poly)

    @property
    def center(self) -> np.ndarray:
        return np.mean(np.asarray(self.polygon), axis=0)


@dataclass(frozen=True)
class Request:
    id: int
    kind: str
    payload: object = None


@dataclass(frozen=True)
class Status:
    request_id: int
    state: str

    def __post_init__(self):
        if self.state not in STATUS_STATES:
            raise InvalidSpecError(f"unknown status state {self.state!r}")


# ---------------------------------------------------------------------------
# lossy channel

@dataclass
class _Transfer:
    msg: object
    first: float
    acked: bool = False
    dead: bool = False


class LossyChannel:
    """Bidirectional lossy link between two named endpoints.

    Pose and area messages go out once and may vanish; newer poses
    supersede older ones at delivery. Requests and statuses retransmit
    every period until answered: a request is answered by any status
    carrying its id, a status by the link-level ack each delivery emits.
    Everything is driven by one seeded event queue, so a given call
    sequence always replays identically.
    """

    def __init__(self, p: float = 0.3, latency=(0.02, 0.1), seed: int = 0,
                 retransmit_period: float = 1.0,
                 deadline: float | None = 30.0, ends=("uav", "ugv")):
        if not 0.0 <= p <= 1.0:
            raise InvalidSpecError("drop probability must lie in [0, 1]")
        if retransmit_period <= 0:
            raise InvalidSpecError("retransmit period must be positive")
        lo, hi = float(latency[0]), float(latency[1])
        if lo < 0 or hi < lo:
            raise InvalidSpecError("latency bounds must satisfy 0 <= lo <= hi")
        if deadline is not None and deadline <= 0:
            raise InvalidSpecError("deadline must be positive when set")
        if len(set(ends)) != 2:
            raise InvalidSpecError("a channel joins exactly two distinct ends")
        self.p = float(p)
        self.latency = (lo, hi)
        self.seed = int(seed)
        self.retransmit_period = float(retransmit_period)
        self.deadline = deadline
        self.ends = tuple(ends)

        self._rng = np.random.default_rng([self.seed, 4242])
        self._heap: list = []
        self._seq = 0
        self._clock = 0.0
        self._inbox = {e: [] for e in self.ends}
        self._seen_req = {e: set() for e in self.ends}
        self._seen_status = {e: set() for e in self.ends}
        self._pose_stamp = {e: {} for e in self.ends}
        self._aoi_seq = {e: {} for e in self.ends}
        self._transfers = {e: {} for e in self.ends}
        self._last_req_id = {e: None for e in self.ends}
        self._expired: dict = {e: [] for e in self.ends}

    def other(self, end: str) -> str:
        return self.ends[1] if end == self.ends[0] else self.ends[0]

    def _push(self, time: float, action: str, *args):
        heapq.heappush(self._heap, (time, self._seq, action, args))
        self._seq += 1

    def _transmit(self, now: float, frm: str, msg, key):
        if self._rng.random() < self.p:
            return
        delay = self._rng.uniform(*self.latency)
        self._push(now + delay, "arrive", frm, msg, key)

    def _advance(self, now: float):
        if now < self._clock - 1e-12:
            raise ContractViolationError("channel time cannot run backwards")
        while self._heap and self._heap[0][0] <= now + 1e-12:
            t, seq, action, args = heapq.heappop(self._heap)
            if action == "tx":
                frm, key = args
                tr = self._transfers[frm][key]
                if tr.acked or tr.dead:
                    continue
                self._transmit(t, frm, tr.msg, key)
                nxt = t + self.retransmit_period
                if self.deadline is None or nxt <= tr.first + self.deadline:
                    self._push(nxt, "tx", frm, key)
            elif action == "arrive":
                frm, msg, key = args
                to = self.other(frm)
                # statuses are acked at the link level on every delivered
                # copy; requests are only answered by an application status
                if key is not None and isinstance(msg, Status):
                    if self._rng.random() >= self.p:
                        delay = self._rng.uniform(*self.latency)
                        self._push(t + delay, "ack", frm, key)
                if isinstance(msg, Request):
                    if msg.id in self._seen_req[to]:
                        continue
                    self._seen_req[to].add(msg.id)
                    self._inbox[to].append((t, seq, msg))
                elif isinstance(msg, Status):
                    # any status answers the matching outstanding request
                    rk = ("req", msg.request_id)
                    tr = self._transfers[to].get(rk)
                    if tr is not None:
                        tr.acked = True
                    sk = (msg.request_id, msg.state)
                    if sk in self._seen_status[to]:
                        continue
                    self._seen_status[to].add(sk)
                    self._inbox[to].append((t, seq, msg))
                else:
                    self._inbox[to].append((t, seq, msg))
            elif action == "ack":
                frm, key = args
                tr = self._transfers[frm][key]
                if not tr.dead:
                    tr.acked = True
            elif action == "expire":
                frm, key = args
                tr = self._transfers[frm][key]
                if not tr.acked:
                    tr.dead = True
                    self._expired[frm].append(key)
        self._clock = max(self._clock, now)


def send(channel: LossyChannel, msg, now: float, frm: str) -> None:
    """Queue a message from endpoint `frm` at simulation time `now`."""
    if frm not in channel.ends:
        raise ContractViolationError(f"unknown endpoint {frm!r}")
    channel._advance(now)
    if isinstance(msg, Request):
        last = channel._last_req_id[frm]
        if last is not None and msg.id <= last:
            raise ContractViolationError(
                f"request ids must increase: {msg.id} after {last}")
        channel._last_req_id[frm] = msg.id
        key = ("req", msg.id)
    elif isinstance(msg, Status):
        key = ("status", msg.request_id, msg.state)
    elif isinstance(msg, (UavPose, UgvPose, AreaOfInterest)):
        key = None
    else:
        raise ContractViolationError(f"unsupported message {type(msg).__name__}")

    if key is None:
        channel._transmit(now, frm, msg, None)
        return
    if key in channel._transfers[frm]:
        raise ContractViolationError(f"duplicate reliable send {key}")
    channel._transfers[frm][key] = _Transfer(msg, now)
    channel._push(now, "tx", frm, key)
    if channel.deadline is not None:
        channel._push(now + channel.deadline, "expire", frm, key)


def poll(channel: LossyChannel, now: float, at: str) -> list:
    """Deliver everything that arrived at endpoint `at` by time `now`.

    Requests and statuses come out once each in arrival order; poses
    collapse to the newest per variant and areas to the newest per id.
    """
    if at not in channel.ends:
        raise ContractViolationError(f"unknown endpoint {at!r}")
    channel._advance(now)
    pending = sorted(channel._inbox[at], key=lambda e: (e[0], e[1]))
    channel._inbox[at] = []
    out = []
    newest_pose: dict = {}
    newest_aoi: dict = {}
    for t, seq, msg in pending:
        if isinstance(msg, (UavPose, UgvPose)):
            kind = type(msg)
            stale = (msg.stamp <= channel._pose_stamp[at].get(kind, -math.inf))
            if stale:
                continue
            prev = newest_pose.get(kind)
            if prev is None or msg.stamp > prev[0]:
                newest_pose[kind] = (msg.stamp, len(out), msg)
                out.append(msg)
        elif isinstance(msg, AreaOfInterest):
            prev = newest_aoi.get(msg.id)
            if prev is not None and seq <= prev[0]:
                continue
            if seq > channel._aoi_seq[at].get(msg.id, -1):
                newest_aoi[msg.id] = (seq, msg)
                out.append(msg)
        else:
            out.append(msg)
    # drop superseded poses delivered in the same poll
    keep = {idx: m for _, idx, m in newest_pose.values()}
    out = [m for i, m in enumerate(out)
           if not isinstance(m, (UavPose, UgvPose)) or keep.get(i) is m]
    for kind, (stamp, _, _) in newest_pose.items():
        channel._pose_stamp[at][kind] = stamp
    for aid, (seq, _) in newest_aoi.items():
        channel._aoi_seq[at][aid] = seq
    return out


def timed_out(channel: LossyChannel, now: float, frm: str) -> list:
    """Request ids from `frm` whose deadline passed without an answer."""
    channel._advance(now)
    out = [k[1] for k in channel._expired[frm] if k[0] == "req"]
    channel._expired[frm] = [k for k in channel._expired[frm] if k[0] != "req"]
    return sorted(out)


# ---------------------------------------------------------------------------
# task tree

PENDING = "pending"
RUNNING = "running"
SUCCEEDED = "succeeded"
FAILED = "failed"
INTERRUPTED = "interrupted"

_LIFECYCLE = {
    PENDING: {RUNNING},
    RUNNING: {SUCCEEDED, FAILED, INTERRUPTED},
    SUCCEEDED: set(),
    FAILED: set(),
    INTERRUPTED: set(),
}
_TERMINAL = (SUCCEEDED, FAILED, INTERRUPTED)


@dataclass
class Task:
    name: str
    kind: str = "leaf"
    fn: object = None
    children: list = field(default_factory=list)
    interrupt_priority: int = 0
    state: str = PENDING


def _transition(task: Task, state: str):
    if state not in _LIFECYCLE[task.state]:
        raise ContractViolationError(
            f"task {task.name!r}: illegal transition {task.state} -> {state}")
    task.state = state


def validate_tree(task: Task):
    """Structural check of a task tree; raises on malformed nodes."""
    if task.kind == "leaf":
        if not callable(task.fn):
            raise StructuralError(f"leaf {task.name!r} has no tick function")
        if task.children:
            raise StructuralError(f"leaf {task.name!r} cannot have children")
    elif task.kind == "sequence":
        if not task.children:
            raise StructuralError(f"sequence {task.name!r} has no children")
    elif task.kind == "parallel":
        if len(task.children) < 2:
            raise StructuralError(
                f"parallel {task.name!r} needs at least two children")
    else:
        raise StructuralError(f"unknown task kind {task.kind!r}")
    for child in task.children:
        validate_tree(child)


def tick(task: Task, dt: float) -> str:
    """Advance the tree one step and return the root's state."""
    if task.state in _TERMINAL:
        return task.state
    if task.kind == "leaf":
        if task.state == PENDING:
            _transition(task, RUNNING)
        out = task.fn(task, dt)
        if out not in (RUNNING, SUCCEEDED, FAILED):
            raise ContractViolationError(
                f"leaf {task.name!r} returned invalid state {out!r}")
        if out != RUNNING:
            _transition(task, out)
        return task.state

    if task.state == PENDING:
        _transition(task, RUNNING)

    if task.kind == "sequence":
        for child in task.children:
            if child.state == SUCCEEDED:
                continue
            if child.state in (FAILED, INTERRUPTED):
                _transition(task, FAILED)
                return task.state
            st = tick(child, dt)
            if st in (FAILED, INTERRUPTED):
                _transition(task, FAILED)
                return task.state
            if st == RUNNING:
                return task.state
        _transition(task, SUCCEEDED)
        return task.state

    # parallel: a child starting interrupts lower-priority siblings that were
    # already running; a child failing interrupts them regardless of age
    was_running = {id(c) for c in task.children if c.state == RUNNING}
    events = []
    for child in task.children:
        if child.state in _TERMINAL:
            continue
        started = child.state == PENDING
        st = tick(child, dt)
        if started:
            events.append((child, "start"))
        if st == FAILED:
            events.append((child, "fail"))
    for child, what in events:
        for sib in task.children:
            if sib is child or sib.state != RUNNING:
                continue
            if sib.interrupt_priority >= child.interrupt_priority:
                continue
            if what == "fail" or id(sib) in was_running:
                _transition(sib, INTERRUPTED)
    if any(c.state == FAILED for c in task.children):
        _transition(task, FAILED)
    elif all(c.state in (SUCCEEDED, INTERRUPTED) for c in task.children):
        _transition(task, SUCCEEDED)
    return task.state


# ---------------------------------------------------------------------------
# coordinated mission

@dataclass(frozen=True)
class UavConfig:
    planner: str = "lawnmower"
    survey_budget: float = 40.0
    survey_resolution: float = 1.0
    survey_speed: float = 2.0
    survey_dwell: float = 1.0
    altitude: float = 4.0
    aoi_count: int = 3
    aoi_size: float = 2.0
    pose_period: float = 1.0
    pressure_sigma: float = 0.8   # kernel width of the weed-pressure world


@dataclass(frozen=True)
class UgvConfig:
    speed: float = 0.8
    treat_speed: float = 0.2
    pose_period: float = 1.0
    detector_confusion: float = 0.05
    roughness: float = 0.0


@dataclass(frozen=True)
class MissionEvent:
    time: float
    agent: str
    event: str
    detail: str


@dataclass
class MissionResult:
    state: str
    events: list
    aois: list
    treated: dict      # aoi id -> weeds treated during its service run
    duration: float


_SALT_SURVEY = 5100


def weed_pressure_world(truth: FieldTruth, sigma: float):
    stems = truth.stems_xy()
    weedy = np.array([p.species != "crop" for p in truth.plants])
    pts = stems[weedy]

    def world(x, y):
        if len(pts) == 0:
            return 0.0
        d2 = (pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2
        return float(np.sum(np.exp(-d2 / (2.0 * sigma * sigma))))

    return world


def _extract_aois(belief, count: int, size: float, extent) -> list:
    """Top weed-pressure spots as square areas, strongest first."""
    order = np.argsort(-belief.mean, kind="stable")
    centers = []
    for idx in order:
        c = belief.cells[idx]
        if all(np.linalg.norm(c - p) >= size for p, _ in centers):
            centers.append((c, float(belief.mean[idx])))
        if len(centers) == count:
            break
    half = size / 2.0
    aois = []
    for i, (c, pressure) in enumerate(centers):
        x = min(max(c[0], half), extent[0] - half)
        y = min(max(c[1], half), extent[1] - half)
        poly = ((x - half, y - half), (x + half, y - half),
                (x + half, y + half), (x - half, y + half))
        aois.append(AreaOfInterest(i + 1, poly, max(pressure, 0.0)))
    return aois


def coordinated_mission(truth: FieldTruth, uavs, ugvs, channel: LossyChannel,
                        seed: int, dt: float = 0.1,
                        mission_deadline: float = 600.0) -> MissionResult:
    """Survey, notify, navigate, treat: one full aerial-ground mission.

    The UAV maps weed pressure with an informative-path survey, picks the
    hottest areas, and requests ground treatment for each one. The UGV
    drives row-aligned legs to every area it learns about, runs the
    treatment unit across it, and reports completion. The mission succeeds
    once every requested area has a succeeded status back at the UAV.
    """
    uavs = list(uavs)
    ugvs = list(ugvs)
    if len(uavs) != 1 or len(ugvs) > 1:
        raise StructuralError("mission supports exactly one UAV and at most one UGV")
    uav_cfg = uavs[0]
    ugv_cfg = ugvs[0] if ugvs else None
    extent = truth.spec.extent

    events: list[MissionEvent] = []
    clock = {"t": 0.0}

    def log(agent, event, detail=""):
        events.append(MissionEvent(round(clock["t"], 6), agent, event, detail))

    # --- UAV side
    world = weed_pressure_world(truth, uav_cfg.pressure_sigma)
    survey = ipp.run_mission(
        world, ipp.SensorModel(), uav_cfg.planner, uav_cfg.survey_budget,
        seed=seed + _SALT_SURVEY, extent=extent,
        resolution=uav_cfg.survey_resolution,
        start=(0.0, 0.0, uav_cfg.altitude), speed=uav_cfg.survey_speed,
        dwell=uav_cfg.survey_dwell, lawnmower_altitude=uav_cfg.altitude)
    aois = _extract_aois(survey.belief, uav_cfg.aoi_count, uav_cfg.aoi_size,
                         extent)

    uav_state = {
        "elapsed": 0.0,
        "last_pose": -math.inf,
        "done": set(),
        "failed": set(),
    }

    def uav_survey(task, step):
        uav_state["elapsed"] += step
        t = clock["t"]
        if t - uav_state["last_pose"] >= uav_cfg.pose_period and survey.trajectory:
            frac = min(uav_state["elapsed"] / uav_cfg.survey_budget, 1.0)
            k = min(int(frac * len(survey.trajectory)),
                    len(survey.trajectory) - 1)
            send(channel, UavPose(tuple(survey.trajectory[k]), t), t, "uav")
            uav_state["last_pose"] = t
            log("uav", "pose_sent")
        if uav_state["elapsed"] >= uav_cfg.survey_budget:
            log("uav", "survey_done", f"{len(aois)} areas")
            return SUCCEEDED
        return RUNNING

    def uav_announce(task, step):
        t = clock["t"]
        for aoi in aois:
            send(channel, Request(aoi.id, "treat_area", aoi), t, "uav")
            log("uav", "request_sent", f"area {aoi.id}")
        return SUCCEEDED

    def uav_await(task, step):
        t = clock["t"]
        for msg in poll(channel, t, "uav"):
            if isinstance(msg, Status):
                log("uav", "status_received", f"{msg.request_id} {msg.state}")
                if msg.state == "succeeded":
                    uav_state["done"].add(msg.request_id)
                elif msg.state == "failed":
                    uav_state["failed"].add(msg.request_id)
        expired = timed_out(channel, t, "uav")
        if expired:
            log("uav", "request_timeout", ",".join(map(str, expired)))
            return FAILED
        if uav_state["failed"]:
            return FAILED
        if uav_state["done"] >= {a.id for a in aois}:
            return SUCCEEDED
        return RUNNING

    uav_tree = Task("uav", "sequence", children=[
        Task("survey", fn=uav_survey),
        Task("announce", fn=uav_announce),
        Task("await", fn=uav_await),
    ])
    validate_tree(uav_tree)

    # --- UGV side
    treated: dict[int, int] = {}
    ugv_state = {
        "pos": np.array([0.0, 0.0]),
        "queue": [],
        "current": None,
        "treat_left": 0.0,
        "last_pose": -math.inf,
    }

    def ugv_treat_area(aoi: AreaOfInterest) -> int:
        c = aoi.center
        half = max(abs(aoi.polygon[0][0] - c[0]), abs(aoi.polygon[0][1] - c[1]))
        x0 = c[0] - half - 0.5
        run = weedops.RobotRun(y_track=float(c[1]), x_start=float(x0),
                               speed=ugv_cfg.treat_speed,
                               roughness=ugv_cfg.roughness,
                               seed=seed * 1000 + aoi.id)
        path = CameraPath(np.array([[x0, c[1]], [c[0] + half + 0.5, c[1]]]),
                          speed=ugv_cfg.treat_speed)
        det = DetectorParams(footprint_radius=0.6,
                             confusion=ugv_cfg.detector_confusion,
                             position_sigma=0.002, radius_sigma=0.0,
                             seed=seed * 1000 + aoi.id)
        evs = simulate_detections(truth, path, det)
        metrics = weedops.simulate_treatment(truth, evs, run)
        return sum(metrics.treated.values())

    def ugv_serve(task, step):
        t = clock["t"]
        for msg in poll(channel, t, "ugv"):
            if isinstance(msg, Request) and msg.kind == "treat_area":
                send(channel, Status(msg.id, "received"), t, "ugv")
                ugv_state["queue"].append(msg)
                log("ugv", "request_received", f"area {msg.id}")
        if t - ugv_state["last_pose"] >= ugv_cfg.pose_period:
            send(channel, UgvPose((*ugv_state["pos"], 0.0), t), t, "ugv")
            ugv_state["last_pose"] = t
        if ugv_state["current"] is None and ugv_state["queue"]:
            ugv_state["queue"].sort(key=lambda r: r.id)
            ugv_state["current"] = ugv_state["queue"].pop(0)
            aoi = ugv_state["current"].payload
            ugv_state["treat_left"] = (2.0 * (aoi.polygon[1][0] - aoi.polygon[0][0])
                                       / ugv_cfg.treat_speed)
        cur = ugv_state["current"]
        if cur is None:
            return RUNNING
        target = cur.payload.center
        pos = ugv_state["pos"]
        # row-aligned legs: close the along-row gap first, then cross rows
        budget = ugv_cfg.speed * step
        dx = target[0] - pos[0]
        mv = min(abs(dx), budget)
        pos[0] += math.copysign(mv, dx) if dx else 0.0
        budget -= mv
        if budget > 0:
            dy = target[1] - pos[1]
            mv = min(abs(dy), budget)
            pos[1] += math.copysign(mv, dy) if dy else 0.0
        if np.linalg.norm(target - pos) > 1e-6:
            return RUNNING
        ugv_state["treat_left"] -= step
        if ugv_state["treat_left"] > 0:
            return RUNNING
        n = ugv_treat_area(cur.payload)
        treated[cur.payload.id] = n
        send(channel, Status(cur.id, "succeeded"), t, "ugv")
        log("ugv", "area_treated", f"area {cur.payload.id}: {n} weeds")
        ugv_state["current"] = None
        return RUNNING

    ugv_tree = Task("ugv-serve", fn=ugv_serve) if ugv_cfg is not None else None
    if ugv_tree is not None:
        validate_tree(ugv_tree)

    # --- event loop
    steps = int(round(mission_deadline / dt))
    state = "failed"
    for k in range(1, steps + 1):
        clock["t"] = k * dt
        st = tick(uav_tree, dt)
        if ugv_tree is not None and ugv_tree.state not in _TERMINAL:
            tick(ugv_tree, dt)
        if st == SUCCEEDED:
            state = "succeeded"
            break
        if st == FAILED:
            state = "failed"
            break
    log("mission", state, f"{len(treated)}/{len(aois)} areas treated")
    return MissionResult(state, events, aois, treated, clock["t"])
