"""Multi-cue 6-DoF sliding-window pose-graph positioning.

Nodes are timestamped SE(3) poses; constraints are relative motion edges
plus four absolute cues: GPS position, IMU roll-pitch, DEM altitude, and an
altitude-smoothness edge between consecutive nodes. Optimization is damped
least squares on the manifold (rotation updated through the exponential
map, right perturbation). The sliding window keeps the newest nodes, holds
its oldest member fixed as the anchor, and archives evicted nodes.

Quaternions use (x, y, z, w) component order throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import (
    ContractViolationError,
    DanglingConstraintError,
    GaugeFreedomError,
    OrderingError,
)

__all__ = [
    "PoseNode",
    "MotionEdge",
    "GpsPrior",
    "ImuPrior",
    "DemPrior",
    "AltitudeSmoothness",
    "WindowConfig",
    "OptimizeResult",
    "PoseGraph",
    "residual",
    "optimize",
    "slide",
    "save_g2o",
    "load_g2o",
    "quat_mul",
    "quat_conj",
    "quat_rotate",
    "quat_to_rotvec",
    "rotvec_to_quat",
    "roll_pitch",
]

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])

# default measurement weights for the altitude cues; scenarios may override
# (e.g. widely spaced nodes on rolling ground want a looser smoothness).
DEFAULT_DEM_SIGMA = 0.3
DEFAULT_SMOOTH_SIGMA = 0.05


# ---------------------------------------------------------------------------
# quaternion helpers (x, y, z, w)

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = q[:3]
    w = q[3]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def rotvec_to_quat(rv: np.ndarray) -> np.ndarray:
    angle = math.sqrt(float(rv @ rv))
    if angle < 1e-12:
        q = np.array([0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2], 1.0])
        return q / math.sqrt(float(q @ q))
    s = math.sin(0.5 * angle) / angle
    return np.array([s * rv[0], s * rv[1], s * rv[2], math.cos(0.5 * angle)])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    if q[3] < 0:
        q = -q
    n = math.sqrt(float(q[:3] @ q[:3]))
    if n < 1e-12:
        return 2.0 * q[:3]
    angle = 2.0 * math.atan2(n, q[3])
    return q[:3] * (angle / n)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _so3_jr_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the SO(3) exponential at rotation vector phi."""
    S = _skew(phi)
    n2 = float(phi @ phi)
    if n2 < 1e-12:
        return np.eye(3) + 0.5 * S + S @ S / 12.0
    n = math.sqrt(n2)
    coef = 1.0 / n2 - (1.0 + math.cos(n)) / (2.0 * n * math.sin(n))
    return np.eye(3) + 0.5 * S + coef * (S @ S)


def roll_pitch(q: np.ndarray) -> tuple[float, float]:
    """Gravity-referenced roll and pitch (intrinsic ZYX decomposition)."""
    x, y, z, w = q
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = math.asin(max(-1.0, min(1.0, 2.0 * (w * y - z * x))))
    return roll, pitch


def _se3_inv(t, q):
    qc = quat_conj(q)
    return -quat_rotate(qc, t), qc


def _se3_mul(t1, q1, t2, q2):
    return t1 + quat_rotate(q1, t2), quat_mul(q1, q2)


def _wrap_pi(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# graph types

@dataclass
class PoseNode:
    id: int
    timestamp: float
    t: np.ndarray
    q: np.ndarray = dc_field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        n = float(np.linalg.norm(self.q))
        if not 0.999 < n < 1.001:
            raise ContractViolationError(f"quaternion norm {n} too far from 1")
        self.q = self.q / n


def _check_info(info, dim: int, name: str):
    if dim == 1:
        if not np.isscalar(info) and np.ndim(info) != 0:
            info = float(np.asarray(info).reshape(()))
        if float(info) <= 0:
            raise ContractViolationError(f"{name} information must be positive")
        return float(info)
    m = np.asarray(info, dtype=float).reshape(dim, dim)
    if not np.allclose(m, m.T, atol=1e-9):
        raise ContractViolationError(f"{name} information must be symmetric")
    if np.min(np.linalg.eigvalsh(m)) <= 0:
        raise ContractViolationError(f"{name} information must be positive definite")
    return m


@dataclass
class MotionEdge:
    i: int
    j: int
    rel_t: np.ndarray
    rel_q: np.ndarray
    information: np.ndarray = dc_field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        self.rel_t = np.asarray(self.rel_t, dtype=float).reshape(3)
        self.rel_q = np.asarray(self.rel_q, dtype=float).reshape(4)
        self.rel_q = self.rel_q / np.linalg.norm(self.rel_q)
        self.information = _check_info(self.information, 6, "motion edge")

    dim = 6
    node_ids = property(lambda self: (self.i, self.j))


@dataclass
class GpsPrior:
    i: int
    position: np.ndarray
    information: np.ndarray = dc_field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.information = _check_info(self.information, 3, "gps prior")

    dim = 3
    node_ids = property(lambda self: (self.i,))


@dataclass
class ImuPrior:
    i: int
    roll_pitch: np.ndarray
    information: np.ndarray = dc_field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        self.roll_pitch = np.asarray(self.roll_pitch, dtype=float).reshape(2)
        self.information = _check_info(self.information, 2, "imu prior")

    dim = 2
    node_ids = property(lambda self: (self.i,))


@dataclass
class DemPrior:
    i: int
    altitude: float
    information: float = 1.0

    def __post_init__(self):
        self.altitude = float(self.altitude)
        self.information = _check_info(self.information, 1, "dem prior")

    dim = 1
    node_ids = property(lambda self: (self.i,))


@dataclass
class AltitudeSmoothness:
    i: int
    j: int
    information: float = 1.0

    def __post_init__(self):
        self.information = _check_info(self.information, 1, "altitude smoothness")

    dim = 1
    node_ids = property(lambda self: (self.i, self.j))


Constraint = MotionEdge | GpsPrior | ImuPrior | DemPrior | AltitudeSmoothness


@dataclass
class WindowConfig:
    window_size: int = 50
    fixed_anchor: bool = True
    max_iterations: int = 50
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.window_size < 2:
            raise ContractViolationError("window_size must be at least 2")


@dataclass
class OptimizeResult:
    initial_cost: float
    cost: float
    iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# residuals

def residual(c: Constraint, nodes: dict[int, PoseNode]) -> np.ndarray:
    """Residual vector of one constraint given the node estimates."""
    try:
        refs = [nodes[i] for i in c.node_ids]
    except KeyError as e:
        raise DanglingConstraintError(f"constraint references missing node {e}") from e
    if isinstance(c, MotionEdge):
        ni, nj = refs
        t_ij, q_ij = _se3_mul(*_se3_inv(ni.t, ni.q), nj.t, nj.q)
        e_t, e_q = _se3_mul(*_se3_inv(c.rel_t, c.rel_q), t_ij, q_ij)
        return np.concatenate([e_t, quat_to_rotvec(e_q)])
    if isinstance(c, GpsPrior):
        return refs[0].t - c.position
    if isinstance(c, ImuPrior):
        r, p = roll_pitch(refs[0].q)
        return np.array([_wrap_pi(r - c.roll_pitch[0]), _wrap_pi(p - c.roll_pitch[1])])
    if isinstance(c, DemPrior):
        return np.array([refs[0].t[2] - c.altitude])
    if isinstance(c, AltitudeSmoothness):
        ni, nj = refs
        return np.array([ni.t[2] - nj.t[2]])
    raise TypeError(f"unknown constraint type {type(c)!r}")


def _whitener(c: Constraint) -> np.ndarray:
    if c.dim == 1:
        return np.array([[math.sqrt(c.information)]])
    return np.linalg.cholesky(c.information).T


def constraint_cost(c: Constraint, nodes) -> float:
    r = residual(c, nodes)
    if c.dim == 1:
        return float(c.information * r[0] * r[0])
    return float(r @ c.information @ r)


def total_cost(constraints, nodes) -> float:
    return sum(constraint_cost(c, nodes) for c in constraints)


# ---------------------------------------------------------------------------
# optimization

class _State:
    """Mutable copy of node estimates the optimizer works on."""

    def __init__(self, nodes: dict[int, PoseNode]):
        self.t = {i: n.t.copy() for i, n in nodes.items()}
        self.q = {i: n.q.copy() for i, n in nodes.items()}
        self.meta = nodes

    def view(self) -> dict[int, PoseNode]:
        return {
            i: PoseNode(i, self.meta[i].timestamp, self.t[i], self.q[i])
            for i in self.t
        }

    def perturbed(self, delta: dict[int, np.ndarray]) -> "_State":
        out = _State.__new__(_State)
        out.meta = self.meta
        out.t = dict(self.t)
        out.q = dict(self.q)
        for i, d in delta.items():
            out.t[i] = self.t[i] + d[:3]
            out.q[i] = quat_mul(self.q[i], rotvec_to_quat(d[3:]))
            out.q[i] /= np.linalg.norm(out.q[i])
        return out


def _residual_state(c: Constraint, state: _State) -> np.ndarray:
    # same math as residual() but against the optimizer's working arrays
    if isinstance(c, MotionEdge):
        ti, qi = state.t[c.i], state.q[c.i]
        tj, qj = state.t[c.j], state.q[c.j]
        t_ij, q_ij = _se3_mul(*_se3_inv(ti, qi), tj, qj)
        e_t, e_q = _se3_mul(*_se3_inv(c.rel_t, c.rel_q), t_ij, q_ij)
        return np.concatenate([e_t, quat_to_rotvec(e_q)])
    if isinstance(c, GpsPrior):
        return state.t[c.i] - c.position
    if isinstance(c, ImuPrior):
        r, p = roll_pitch(state.q[c.i])
        return np.array([_wrap_pi(r - c.roll_pitch[0]), _wrap_pi(p - c.roll_pitch[1])])
    if isinstance(c, DemPrior):
        return np.array([state.t[c.i][2] - c.altitude])
    ni, nj = state.t[c.i], state.t[c.j]
    return np.array([ni[2] - nj[2]])


def _cost_state(constraints, state: _State) -> float:
    total = 0.0
    for c in constraints:
        r = _residual_state(c, state)
        if c.dim == 1:
            total += c.information * r[0] * r[0]
        else:
            total += float(r @ c.information @ r)
    return total


_FD_STEP = 1e-6


def _constraint_jacobian(c: Constraint, state: _State, free: dict[int, int]) -> list[tuple[int, np.ndarray]]:
    """[(node_id, dr/d delta_node)] for the free nodes this constraint touches.

    Linear constraints get analytic Jacobians; the manifold ones use central
    differences on the right-perturbation parameterization.
    """
    blocks = []
    if isinstance(c, GpsPrior):
        if c.i in free:
            J = np.zeros((3, 6))
            J[:, :3] = np.eye(3)
            blocks.append((c.i, J))
        return blocks
    if isinstance(c, DemPrior):
        if c.i in free:
            J = np.zeros((1, 6))
            J[0, 2] = 1.0
            blocks.append((c.i, J))
        return blocks
    if isinstance(c, AltitudeSmoothness):
        for nid, sign in ((c.i, 1.0), (c.j, -1.0)):
            if nid in free:
                J = np.zeros((1, 6))
                J[0, 2] = sign
                blocks.append((nid, J))
        return blocks
    if isinstance(c, MotionEdge):
        ti, qi = state.t[c.i], state.q[c.i]
        Ri_T = quat_to_matrix(qi).T
        A = quat_to_matrix(quat_conj(c.rel_q))
        a = Ri_T @ (state.t[c.j] - ti)
        r_rot = _residual_state(c, state)[3:]
        ARiT = A @ Ri_T
        jr_inv = _so3_jr_inv(r_rot)
        if c.i in free:
            J = np.zeros((6, 6))
            J[:3, :3] = -ARiT
            J[:3, 3:] = A @ _skew(a)
            J[3:, 3:] = -jr_inv.T @ A  # left-Jacobian inverse is jr_inv.T
            blocks.append((c.i, J))
        if c.j in free:
            J = np.zeros((6, 6))
            J[:3, :3] = ARiT
            J[3:, 3:] = jr_inv
            blocks.append((c.j, J))
        return blocks
    # ImuPrior: numeric central difference on the rotation parameters
    for nid in c.node_ids:
        if nid not in free:
            continue
        J = np.zeros((c.dim, 6))
        for k in range(3, 6):
            d = np.zeros(6)
            d[k] = _FD_STEP
            rp = _residual_state(c, state.perturbed({nid: d}))
            rm = _residual_state(c, state.perturbed({nid: -d}))
            J[:, k] = (rp - rm) / (2.0 * _FD_STEP)
        blocks.append((nid, J))
    return blocks


def _check_gauge(active: list, free_ids: list[int]) -> None:
    """Every free component needs an absolute cue or a tie to a fixed node.

    Unobserved subspaces inside a grounded component (say, the rotation of a
    GPS-only node) are fine: damping leaves them at their initial values.
    A component with no absolute reference at all has a free global gauge.
    """
    parent = {i: i for i in free_ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    grounded = set()
    for c in active:
        ids = [i for i in c.node_ids if i in parent]
        if len(ids) == 2:
            ra, rb = find(ids[0]), find(ids[1])
            if ra != rb:
                parent[ra] = rb
        if len(c.node_ids) == 1 or len(ids) < len(c.node_ids):
            # unary prior, or an edge to a fixed/archived node
            grounded.update(ids)
    grounded_roots = {find(i) for i in grounded}
    for i in free_ids:
        if find(i) not in grounded_roots:
            raise GaugeFreedomError(
                "pose graph is underconstrained; add a prior or anchor a node"
            )


def optimize(
    graph: "PoseGraph",
    cfg: WindowConfig | None = None,
    fixed: set[int] | None = None,
) -> OptimizeResult:
    """Damped least squares over the graph's active window.

    Only in-window, non-fixed nodes move. Archived nodes act as constants.
    Raises GaugeFreedomError when the linearized system is rank deficient
    (e.g. a chain with no absolute prior and no anchored node).
    """
    cfg = cfg or graph.cfg
    fixed = set(fixed) if fixed is not None else graph.default_fixed()
    window_ids = graph.window_ids()
    free_ids = [i for i in window_ids if i not in fixed]
    if not free_ids:
        cost = total_cost(graph.constraints, graph.all_nodes())
        return OptimizeResult(cost, cost, 0, True)

    all_nodes = graph.all_nodes()
    free_set = set(free_ids)
    window_set = set(window_ids)
    active = []
    passive_cost = 0.0
    for c in graph.constraints:
        for i in c.node_ids:
            if i not in all_nodes:
                raise DanglingConstraintError(f"constraint references missing node {i}")
        if any(i in free_set for i in c.node_ids):
            active.append(c)
        elif any(i in window_set for i in c.node_ids):
            # touches only fixed window nodes: constant, but part of the cost
            passive_cost += constraint_cost(c, all_nodes)
    if not active:
        return OptimizeResult(passive_cost, passive_cost, 0, True)

    needed = set(window_ids)
    for c in active:
        needed.update(c.node_ids)
    state = _State({i: all_nodes[i] for i in needed})
    _check_gauge(active, free_ids)
    index = {nid: 6 * k for k, nid in enumerate(free_ids)}
    n_params = 6 * len(free_ids)
    whiteners = [_whitener(c) for c in active]

    def build_system(st: _State):
        H = np.zeros((n_params, n_params))
        g = np.zeros(n_params)
        for c, L in zip(active, whiteners):
            rw = L @ _residual_state(c, st)
            blocks = [
                (index[nid], L @ Jb) for nid, Jb in _constraint_jacobian(c, st, index)
            ]
            for off_a, Ja in blocks:
                g[off_a : off_a + 6] += Ja.T @ rw
                for off_b, Jb in blocks:
                    H[off_a : off_a + 6, off_b : off_b + 6] += Ja.T @ Jb
        return H, g

    cost = _cost_state(active, state) + passive_cost
    initial_cost = cost
    lam = 1e-4
    converged = False
    icount = 0
    for icount in range(1, cfg.max_iterations + 1):
        H, g = build_system(state)
        if float(np.max(np.abs(g))) < 1e-14:
            converged = True
            break
        delta = np.linalg.solve(H + lam * np.eye(n_params), -g)
        trial = state.perturbed(
            {nid: delta[off : off + 6] for nid, off in index.items()}
        )
        trial_cost = _cost_state(active, trial) + passive_cost
        if trial_cost <= cost:
            improvement = cost - trial_cost
            state = trial
            cost = trial_cost
            lam = max(lam / 10.0, 1e-12)
            if improvement < cfg.epsilon:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break

    for nid in free_ids:
        node = graph.nodes[nid]
        node.t = state.t[nid]
        node.q = state.q[nid]
    return OptimizeResult(initial_cost, cost, icount, converged)


# ---------------------------------------------------------------------------
# graph container + sliding window

class PoseGraph:
    """Single-owner pose graph with a sliding optimization window."""

    def __init__(self, cfg: WindowConfig | None = None):
        self.cfg = cfg or WindowConfig()
        self.nodes: dict[int, PoseNode] = {}
        self.archived: dict[int, PoseNode] = {}
        self.constraints: list[Constraint] = []
        self._order: list[int] = []

    def add_node(self, node: PoseNode) -> None:
        if self._order:
            last = self.nodes[self._order[-1]].timestamp
            if node.timestamp <= last:
                raise OrderingError(
                    f"node timestamp {node.timestamp} not after {last}"
                )
        if node.id in self.nodes or node.id in self.archived:
            raise OrderingError(f"duplicate node id {node.id}")
        self.nodes[node.id] = node
        self._order.append(node.id)

    def add_constraint(self, c: Constraint) -> None:
        for i in c.node_ids:
            if i not in self.nodes and i not in self.archived:
                raise DanglingConstraintError(f"constraint references missing node {i}")
        self.constraints.append(c)

    def window_ids(self) -> list[int]:
        return list(self._order)

    def default_fixed(self) -> set[int]:
        # plain optimize() relies on priors for gauge; slide() passes the anchor
        return set()

    def all_nodes(self) -> dict[int, PoseNode]:
        merged = dict(self.archived)
        merged.update(self.nodes)
        return merged

    def trajectory(self) -> dict[int, np.ndarray]:
        """id -> translation for archived and live nodes."""
        return {i: n.t.copy() for i, n in self.all_nodes().items()}


def slide(
    graph: PoseGraph,
    new_node: PoseNode,
    new_constraints: list[Constraint],
    cfg: WindowConfig | None = None,
) -> OptimizeResult:
    """Insert a node, evict beyond the window, anchor the oldest, optimize."""
    cfg = cfg or graph.cfg
    graph.add_node(new_node)
    for c in new_constraints:
        graph.add_constraint(c)
    while len(graph._order) > cfg.window_size:
        evicted = graph._order.pop(0)
        node = graph.nodes.pop(evicted)
        node.t.flags.writeable = False
        node.q.flags.writeable = False
        graph.archived[evicted] = node
    fixed = {graph._order[0]} if cfg.fixed_anchor and len(graph._order) > 1 else set()
    return optimize(graph, cfg, fixed=fixed)


# ---------------------------------------------------------------------------
# g2o-style snapshot I/O

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _upper(m: np.ndarray) -> list[float]:
    d = m.shape[0]
    return [m[i, j] for i in range(d) for j in range(i, d)]


def _from_upper(vals: list[float], d: int) -> np.ndarray:
    m = np.zeros((d, d))
    it = iter(vals)
    for i in range(d):
        for j in range(i, d):
            m[i, j] = m[j, i] = next(it)
    return m


def save_g2o(graph: PoseGraph, path) -> None:
    lines = []
    for nid in sorted(graph.all_nodes()):
        n = graph.all_nodes()[nid]
        lines.append(f"VERTEX_SE3 {nid} {_fmt(n.t)} {_fmt(n.q)}")
    for c in graph.constraints:
        if isinstance(c, MotionEdge):
            lines.append(
                f"EDGE_SE3 {c.i} {c.j} {_fmt(c.rel_t)} {_fmt(c.rel_q)} "
                f"{_fmt(_upper(c.information))}"
            )
        elif isinstance(c, GpsPrior):
            lines.append(
                f"PRIOR_GPS {c.i} {_fmt(c.position)} {_fmt(_upper(c.information))}"
            )
        elif isinstance(c, ImuPrior):
            lines.append(
                f"PRIOR_IMU {c.i} {_fmt(c.roll_pitch)} {_fmt(_upper(c.information))}"
            )
        elif isinstance(c, DemPrior):
            lines.append(f"PRIOR_DEM {c.i} {c.altitude!r} {c.information!r}")
        else:
            lines.append(f"EDGE_ZSMOOTH {c.i} {c.j} {c.information!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_g2o(path) -> PoseGraph:
    """Rebuild a graph snapshot; timestamps are synthesized from node ids."""
    graph = PoseGraph()
    pending: list[Constraint] = []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        tag = tok[0]
        vals = [float(v) for v in tok[1:]]
        if tag == "VERTEX_SE3":
            nid = int(vals[0])
            graph.add_node(PoseNode(nid, float(nid), vals[1:4], vals[4:8]))
        elif tag == "EDGE_SE3":
            pending.append(
                MotionEdge(int(vals[0]), int(vals[1]), vals[2:5], vals[5:9], _from_upper(vals[9:30], 6))
            )
        elif tag == "PRIOR_GPS":
            pending.append(GpsPrior(int(vals[0]), vals[1:4], _from_upper(vals[4:10], 3)))
        elif tag == "PRIOR_IMU":
            pending.append(ImuPrior(int(vals[0]), vals[1:3], _from_upper(vals[3:6], 2)))
        elif tag == "PRIOR_DEM":
            pending.append(DemPrior(int(vals[0]), vals[1], vals[2]))
        elif tag == "EDGE_ZSMOOTH":
            pending.append(AltitudeSmoothness(int(vals[0]), int(vals[1]), vals[2]))
        else:
            raise ValueError(f"unknown line tag {tag!r}")
    for c in pending:
        graph.add_constraint(c)
    return graph
