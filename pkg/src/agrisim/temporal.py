"""Session-to-session registration by plant arrangement.

Crop stems barely move between visits, so the local constellation around
each stem is a stable signature even when the maps disagree in scale and
heading. Each stem gets a scale- and rotation-normalized descriptor of its
k nearest neighbors; descriptors are matched mutually with a ratio test,
and the surviving pairs vote for a 2-D similarity transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolationError, InsufficientStructureError

__all__ = [
    "Similarity2D",
    "TemporalMatches",
    "temporal_descriptor",
    "temporal_match",
]


@dataclass
class Similarity2D:
    """y = scale * R(angle) x + t."""

    scale: float
    angle: float
    t: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(2)
        if self.scale <= 0:
            raise ContractViolationError("similarity scale must be positive")

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts, dtype=float) @ self.rotation.T + self.t


@dataclass
class TemporalMatches:
    pairs: np.ndarray            # (m, 2) int, indices into (stems_t0, stems_t1)
    transform: Similarity2D
    residuals: np.ndarray        # (m,) alignment residual per pair, m

    def __len__(self) -> int:
        return self.pairs.shape[0]


def _neighbor_offsets(stems: np.ndarray, index: int, k: int) -> np.ndarray:
    d = stems - stems[index]
    dist = np.hypot(d[:, 0], d[:, 1])
    dist[index] = np.inf
    nn = np.argsort(dist, kind="stable")[:k]
    return d[nn]


def temporal_descriptor(stems, index: int, k: int = 6) -> np.ndarray:
    """Constellation signature of stem ``index``: 2k reals.

    The k nearest-neighbor offsets are normalized by their mean radius
    (scale) and rotated so the constellation's principal direction becomes
    the x axis (rotation), with its sign fixed by the strongest neighbor.
    Entries are the normalized offsets in angular order.
    """
    stems = np.asarray(stems, dtype=float).reshape(-1, 2)
    n = len(stems)
    if k < 2:
        raise ContractViolationError("descriptor needs at least 2 neighbors")
    if n < k + 1:
        raise InsufficientStructureError(
            f"{n} stems cannot support a {k}-neighbor descriptor"
        )
    if not 0 <= index < n:
        raise ContractViolationError("stem index out of range")

    off = _neighbor_offsets(stems, index, k)
    radii = np.hypot(off[:, 0], off[:, 1])
    rn = radii / radii.mean()

    # principal direction of the constellation, sign-fixed so the neighbor
    # with the largest |projection| points positive
    cov = off.T @ off
    evals, evecs = np.linalg.eigh(cov)
    u = evecs[:, int(np.argmax(evals))]
    proj = off @ u
    if proj[int(np.argmax(np.abs(proj)))] < 0:
        u = -u
    v = np.array([-u[1], u[0]])
    ang = np.arctan2(off @ v, off @ u)

    order = np.argsort(ang, kind="stable")
    out = np.empty(2 * k)
    out[0::2] = rn[order] * np.cos(ang[order])
    out[1::2] = rn[order] * np.sin(ang[order])
    return out


def _all_descriptors(stems: np.ndarray, k: int) -> np.ndarray:
    return np.stack([temporal_descriptor(stems, i, k) for i in range(len(stems))])


def _fit_similarity(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> Similarity2D:
    """Weighted least-squares similarity y ~ sR x + t (Umeyama form)."""
    wsum = w.sum()
    mx = (w @ x) / wsum
    my = (w @ y) / wsum
    xc = x - mx
    yc = y - my
    cov = (yc * w[:, None]).T @ xc / wsum
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(2)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[1, 1] = -1.0
    R = U @ S @ Vt
    var_x = float((w @ np.sum(xc**2, axis=1)) / wsum)
    if var_x <= 0:
        raise InsufficientStructureError("matched stems are coincident")
    s = float(np.trace(np.diag(D) @ S)) / var_x
    if s <= 0:
        raise InsufficientStructureError("degenerate similarity fit")
    t = my - s * (R @ mx)
    return Similarity2D(s, math.atan2(R[1, 0], R[0, 0]), t)


def _irls_similarity(x: np.ndarray, y: np.ndarray, rounds: int = 4) -> Similarity2D:
    w = np.ones(len(x))
    fit = _fit_similarity(x, y, w)
    for _ in range(rounds):
        r = np.linalg.norm(y - fit.apply(x), axis=1)
        scale = max(1.4826 * float(np.median(r)), 1e-9)
        w = 1.0 / (1.0 + (r / (2.0 * scale)) ** 2)
        fit = _fit_similarity(x, y, w)
    return fit


_CONSENSUS_POOL = 40


def _consensus_similarity(x: np.ndarray, y: np.ndarray) -> Similarity2D:
    """Similarity fit that tolerates heavily contaminated correspondences.

    Repetitive planting means descriptor matches include structured aliases
    (whole-row shifts), which a reweighted least-squares fit latches onto.
    Two correspondences determine a similarity exactly, so every pair drawn
    from the pool is tried and the transform most other correspondences
    agree with wins; the winner is refit on its consensus set.
    """
    n = len(x)
    pool = np.arange(min(n, _CONSENSUS_POOL))
    spacing = float(np.median(cKDTree(y).query(y, k=2)[0][:, 1]))
    gate = max(0.25 * spacing, 1e-9)
    best = None
    for ai in range(len(pool)):
        for bi in range(ai + 1, len(pool)):
            a, b = pool[ai], pool[bi]
            dx = x[b] - x[a]
            dy = y[b] - y[a]
            nx = np.hypot(*dx)
            if nx < 1e-9:
                continue
            s = np.hypot(*dy) / nx
            ang = np.arctan2(dy[1], dy[0]) - np.arctan2(dx[1], dx[0])
            c, sn = np.cos(ang), np.sin(ang)
            rot = np.array([[c, -sn], [sn, c]])
            t = y[a] - s * rot @ x[a]
            r = np.linalg.norm(x @ (s * rot).T + t - y, axis=1)
            score = int(np.sum(r <= gate))
            if best is None or score > best[0]:
                best = (score, r <= gate)
    if best is None or best[0] < 3:
        raise InsufficientStructureError(
            "stem correspondences admit no consistent similarity"
        )
    mask = best[1]
    return _irls_similarity(x[mask], y[mask])


def temporal_match(stems_t0, stems_t1, k: int = 6,
                   ratio_threshold: float = 0.8) -> TemporalMatches:
    """Match stems across two sessions and fit the similarity between them.

    Mutual nearest neighbors in descriptor space that pass the distance
    ratio test seed a robust similarity fit. Dropout between sessions
    perturbs many stems' neighbor sets, so descriptors alone only pin down
    a subset; the fitted transform then re-matches every stem spatially
    (mutual nearest neighbor within a lattice-scale gate) and the final
    transform is refit over those pairs.
    """
    s0 = np.asarray(stems_t0, dtype=float).reshape(-1, 2)
    s1 = np.asarray(stems_t1, dtype=float).reshape(-1, 2)
    if not 0 < ratio_threshold <= 1:
        raise ContractViolationError("ratio_threshold must lie in (0, 1]")
    d0 = _all_descriptors(s0, k)   # raises if too few stems
    d1 = _all_descriptors(s1, k)

    t0 = cKDTree(d0)
    t1 = cKDTree(d1)
    dist01, nn01 = t1.query(d0, k=2)
    _, nn10 = t0.query(d1, k=1)

    seeds = []
    for i in range(len(s0)):
        j = int(nn01[i, 0])
        if int(nn10[j]) != i:
            continue
        second = dist01[i, 1]
        if second > 0 and dist01[i, 0] / second > ratio_threshold:
            continue
        seeds.append((i, j))
    if len(seeds) < 3:
        raise InsufficientStructureError(
            f"only {len(seeds)} stem pairs survive matching"
        )
    # best descriptor distances first so the consensus pool is the cleanest
    seeds = np.array(seeds, dtype=int)
    seeds = seeds[np.argsort(dist01[seeds[:, 0], 0], kind="stable")]
    fit = _consensus_similarity(s0[seeds[:, 0]], s1[seeds[:, 1]])

    # guided pass: project session-0 stems through the fit and pair up
    # mutual spatial nearest neighbors that land within half a stem spacing
    proj = fit.apply(s0)
    p1 = cKDTree(s1)
    spacing = float(np.median(p1.query(s1, k=2)[0][:, 1]))
    gate = 0.5 * spacing
    dp, jp = p1.query(proj)
    _, iq = cKDTree(proj).query(s1)
    pairs = np.array([
        (i, int(jp[i])) for i in range(len(s0))
        if dp[i] <= gate and int(iq[int(jp[i])]) == i
    ], dtype=int).reshape(-1, 2)
    if len(pairs) >= 3:
        fit = _irls_similarity(s0[pairs[:, 0]], s1[pairs[:, 1]])
    else:
        pairs = seeds
    residuals = np.linalg.norm(s1[pairs[:, 1]] - fit.apply(s0[pairs[:, 0]]),
                               axis=1)
    return TemporalMatches(pairs, fit, residuals)
