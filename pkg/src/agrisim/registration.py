"""Aerial-ground map registration.

Aligns a dense ground-robot cloud with a coarse aerial cloud that disagree
in geo-tag, scale, and heading. Pipeline: rasterize both clouds into
two-channel grids (surface height + excess green), estimate a dense
cell-to-cell flow with coarse-to-fine PatchMatch over patch descriptors,
keep the largest displacement-coherent cluster as 3-D correspondences, fit
a preliminary affine transform, then refine it with affine coherent point
drift on the vegetation points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ContractViolationError,
    NoFlowError,
    RankDeficiencyError,
    RegistrationUnreliableError,
)
from .grids import ColoredCloud, GridMap2D
from .spectral import vegetation_filter

__all__ = [
    "MultimodalGrid",
    "FlowField",
    "MatchSet",
    "AffineTransform3D",
    "RegistrationConfig",
    "RegistrationResult",
    "CpdResult",
    "build_grid",
    "match_flow",
    "coherent_matches",
    "estimate_affine",
    "cpd_affine",
    "register",
]


# ---------------------------------------------------------------------------
# multimodal grids

@dataclass
class MultimodalGrid:
    """Height + ExG raster aggregated from a cloud; invalid cells are empty."""

    grid: GridMap2D            # layers: height, exg
    valid: np.ndarray          # (H, W) bool

    @property
    def height(self) -> np.ndarray:
        return self.grid.layer("height")

    @property
    def exg(self) -> np.ndarray:
        return self.grid.layer("exg")

    @property
    def shape(self):
        return self.grid.shape


def build_grid(cloud: ColoredCloud, cell_size: float) -> MultimodalGrid:
    """Aggregate a cloud into per-cell mean height and mean-color ExG."""
    if len(cloud) == 0:
        raise ContractViolationError("cannot build a grid from an empty cloud")
    if cell_size <= 0:
        raise ContractViolationError("cell_size must be positive")
    pts = cloud.points
    ox = math.floor(pts[:, 0].min() / cell_size) * cell_size
    oy = math.floor(pts[:, 1].min() / cell_size) * cell_size
    col = np.floor((pts[:, 0] - ox) / cell_size).astype(int)
    row = np.floor((pts[:, 1] - oy) / cell_size).astype(int)
    w = int(col.max()) + 1
    h = int(row.max()) + 1

    flat = row * w + col
    count = np.bincount(flat, minlength=h * w).astype(float)
    zsum = np.bincount(flat, weights=pts[:, 2], minlength=h * w)
    rsum = np.bincount(flat, weights=cloud.colors[:, 0], minlength=h * w)
    gsum = np.bincount(flat, weights=cloud.colors[:, 1], minlength=h * w)
    bsum = np.bincount(flat, weights=cloud.colors[:, 2], minlength=h * w)

    valid = (count > 0).reshape(h, w)
    safe = np.maximum(count, 1.0)
    height = (zsum / safe).reshape(h, w)
    r, g, b = (rsum / safe), (gsum / safe), (bsum / safe)
    exg = (2.0 * g - r - b).reshape(h, w)
    grid = GridMap2D((ox, oy), cell_size, {"height": height, "exg": exg})
    return MultimodalGrid(grid, valid)


# ---------------------------------------------------------------------------
# patch descriptors: oriented-gradient histograms over 4x4 sub-blocks

_DESC_BLOCKS = 4
_DESC_BINS = 8


def _patch_descriptors(channel: np.ndarray, valid: np.ndarray,
                       block_cells: int = 2) -> np.ndarray:
    """(H, W, 128) descriptor per cell; invalid cells contribute the mean."""
    filled = channel.copy()
    if valid.any():
        filled[~valid] = channel[valid].mean()
    gy, gx = np.gradient(filled)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bins = (np.floor((ang + math.pi) / (2.0 * math.pi / _DESC_BINS)).astype(int)
            % _DESC_BINS)

    h, w = channel.shape
    half = _DESC_BLOCKS * block_cells // 2
    binmaps = np.zeros((_DESC_BINS, h + 2 * half, w + 2 * half))
    for b in range(_DESC_BINS):
        binmaps[b, half : half + h, half : half + w] = np.where(bins == b, mag, 0.0)
    # integral images for constant-time block sums
    integ = np.cumsum(np.cumsum(binmaps, axis=1), axis=2)
    integ = np.pad(integ, ((0, 0), (1, 0), (1, 0)))

    bc = block_cells
    desc = np.empty((h, w, _DESC_BLOCKS * _DESC_BLOCKS * _DESC_BINS))
    k = 0
    for bi in range(_DESC_BLOCKS):
        for bj in range(_DESC_BLOCKS):
            r0 = bi * bc
            c0 = bj * bc
            for b in range(_DESC_BINS):
                s = (
                    integ[b, r0 + bc : r0 + bc + h, c0 + bc : c0 + bc + w]
                    - integ[b, r0 : r0 + h, c0 + bc : c0 + bc + w]
                    - integ[b, r0 + bc : r0 + bc + h, c0 : c0 + w]
                    + integ[b, r0 : r0 + h, c0 : c0 + w]
                )
                desc[:, :, k] = s
                k += 1
    return desc


def _source_scale(desc: np.ndarray, valid: np.ndarray) -> float:
    norms = np.linalg.norm(desc[valid], axis=-1)
    mean = norms.mean() if norms.size else 0.0
    return float(mean) if mean > 0 else 1.0


_DESC_CLAMP = 0.2


def _finish_descriptors(desc: np.ndarray, scale: float) -> np.ndarray:
    """Per-patch normalization with clamped entries.

    Unit-normalizing each descriptor (with a floor so near-empty patches
    stay near zero instead of blowing up) and clamping single entries keeps
    isolated huge gradients, e.g. from corrupted cells, from dominating the
    matching cost. The floor derives from the source grid's mean norm so
    both grids share one reference scale.
    """
    floor = max(0.1 * scale, 1e-12)
    norms = np.linalg.norm(desc, axis=-1)
    d = desc / np.maximum(norms, floor)[..., None]
    d = np.minimum(d, _DESC_CLAMP)
    n2 = np.linalg.norm(d, axis=-1)
    return d / np.maximum(n2, 0.5)[..., None]


# ---------------------------------------------------------------------------
# coarse-to-fine PatchMatch flow

@dataclass
class FlowParams:
    levels: int = 3
    iterations: int = 6
    search_radius: int = 24        # cells at full resolution
    refine_radius: int = 3         # random-search reach below the top level
    patch_cells: int = 2           # cells per descriptor sub-block side
    lam: float = 1.0               # weight of the height-descriptor distance
    seed: int = 0


@dataclass
class FlowField:
    """Cell displacements from a source grid into a target grid.

    Displacements are relative to the geo-referenced alignment of the two
    rasters: flow (0, 0) means the cell sits at the same world position in
    both grids. ``offset`` is the (row, col) index shift that geo-alignment
    induces between the two arrays.
    """

    du: np.ndarray                 # (H, W) int, column displacement
    dv: np.ndarray                 # (H, W) int, row displacement
    cost: np.ndarray               # (H, W) matching cost
    valid: np.ndarray              # (H, W) bool, cells with a usable flow
    offset: tuple                  # (row, col) geo-alignment index shift
    source: MultimodalGrid
    target: MultimodalGrid


def _downsample(mm: MultimodalGrid) -> MultimodalGrid:
    h, w = mm.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    hgt = np.zeros((h2, w2))
    exg = np.zeros((h2, w2))
    cnt = np.zeros((h2, w2))
    for di in range(2):
        for dj in range(2):
            sub_v = mm.valid[di::2, dj::2]
            sub_h = mm.height[di::2, dj::2]
            sub_e = mm.exg[di::2, dj::2]
            hh, ww = sub_v.shape
            cnt[:hh, :ww] += sub_v
            hgt[:hh, :ww] += np.where(sub_v, sub_h, 0.0)
            exg[:hh, :ww] += np.where(sub_v, sub_e, 0.0)
    valid = cnt > 0
    safe = np.maximum(cnt, 1.0)
    grid = GridMap2D(mm.grid.origin, mm.grid.cell_size * 2.0,
                     {"height": hgt / safe, "exg": exg / safe})
    return MultimodalGrid(grid, valid)


def _flow_cost(da, db, ha, hb, valid_b, dv, du, off, lam):
    """Vectorized candidate cost; invalid or out-of-range targets get inf."""
    h, w = da.shape[:2]
    rows = np.arange(h)[:, None] + dv + off[0]
    cols = np.arange(w)[None, :] + du + off[1]
    ok = (rows >= 0) & (rows < hb.shape[0]) & (cols >= 0) & (cols < hb.shape[1])
    rc = np.clip(rows, 0, hb.shape[0] - 1)
    cc = np.clip(cols, 0, hb.shape[1] - 1)
    ok &= valid_b[rc, cc]
    c = (np.linalg.norm(da - db[rc, cc], axis=-1)
         + lam * np.linalg.norm(ha - hb[rc, cc], axis=-1))
    return np.where(ok, c, np.inf)


def match_flow(j_a: MultimodalGrid, j_g: MultimodalGrid,
               params: FlowParams | None = None) -> FlowField:
    """Dense displacement field from the aerial grid into the ground grid."""
    params = params or FlowParams()
    if not j_a.valid.any() or not j_g.valid.any():
        raise NoFlowError("a grid with no valid cells cannot be matched")
    if not math.isclose(j_a.grid.cell_size, j_g.grid.cell_size):
        raise ContractViolationError("grids must share a cell size")

    pyr_a, pyr_g = [j_a], [j_g]
    for _ in range(params.levels - 1):
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_g.append(_downsample(pyr_g[-1]))

    cs0 = j_a.grid.cell_size
    base_r = (j_a.grid.origin[1] - j_g.grid.origin[1]) / cs0
    base_c = (j_a.grid.origin[0] - j_g.grid.origin[0]) / cs0

    du = dv = cost = None
    off = (0, 0)
    for level in range(params.levels - 1, -1, -1):
        a, g = pyr_a[level], pyr_g[level]
        rng = np.random.default_rng([params.seed, level])
        pc = params.patch_cells
        de_a = _patch_descriptors(a.exg, a.valid, pc)
        de_g = _patch_descriptors(g.exg, g.valid, pc)
        dh_a = _patch_descriptors(a.height, a.valid, pc)
        dh_g = _patch_descriptors(g.height, g.valid, pc)
        # both grids share the source-side scale so distances stay comparable
        se = _source_scale(de_a, a.valid)
        sh = _source_scale(dh_a, a.valid)
        de_a = _finish_descriptors(de_a, se)
        de_g = _finish_descriptors(de_g, se)
        dh_a = _finish_descriptors(dh_a, sh)
        dh_g = _finish_descriptors(dh_g, sh)
        h, w = a.shape
        radius = max(1, round(params.search_radius / (2 ** level)))
        off = (round(base_r / (2 ** level)), round(base_c / (2 ** level)))

        def cost_of(cv, cd):
            return _flow_cost(de_a, de_g, dh_a, dh_g, g.valid, cv, cd, off,
                              params.lam)

        if du is None:
            # coarsest level: random seeds within the search range, with the
            # zero flow as a fallback seed so exact geo alignment never loses
            du = rng.integers(-radius, radius + 1, (h, w))
            dv = rng.integers(-radius, radius + 1, (h, w))
            cost = cost_of(dv, du)
            zero = np.zeros((h, w), dtype=int)
            c0 = cost_of(zero, zero)
            keep = cost <= c0
            du = np.where(keep, du, 0)
            dv = np.where(keep, dv, 0)
            cost = np.minimum(cost, c0)
        else:
            du = np.kron(du * 2, np.ones((2, 2), dtype=int))[:h, :w]
            dv = np.kron(dv * 2, np.ones((2, 2), dtype=int))[:h, :w]
            cost = cost_of(dv, du)

        for _ in range(params.iterations):
            # propagation: adopt a displaced cell's flow if it fits better;
            # power-of-two jumps spread a good flow across the grid quickly
            for step in (1, 2, 4, 8):
                for shift in ((0, step), (0, -step), (step, 0), (-step, 0)):
                    cd = np.roll(du, shift, axis=(0, 1))
                    cv = np.roll(dv, shift, axis=(0, 1))
                    cc = cost_of(cv, cd)
                    better = cc < cost
                    du = np.where(better, cd, du)
                    dv = np.where(better, cv, dv)
                    cost = np.where(better, cc, cost)
            # random search with shrinking radius; below the top level the
            # search only refines locally, so the coarse solution is not
            # thrown away for a far-off self-similar match
            r = radius if level == params.levels - 1 \
                else min(radius, params.refine_radius)
            while r >= 1:
                cd = np.clip(du + rng.integers(-r, r + 1, (h, w)), -radius, radius)
                cv = np.clip(dv + rng.integers(-r, r + 1, (h, w)), -radius, radius)
                cc = cost_of(cv, cd)
                better = cc < cost
                du = np.where(better, cd, du)
                dv = np.where(better, cv, dv)
                cost = np.where(better, cc, cost)
                r //= 2

    usable = j_a.valid & np.isfinite(cost)
    return FlowField(du, dv, cost, usable, off, j_a, j_g)


# ---------------------------------------------------------------------------
# coherent clusters -> 3-D correspondences

@dataclass
class MatchSet:
    source: np.ndarray     # (m, 3) points in the aerial map
    target: np.ndarray     # (m, 3) corresponding points in the ground map

    def __len__(self) -> int:
        return self.source.shape[0]


# mode-seeking bandwidth, deliberately independent of the membership radius
# so that shrinking eps can only ever shrink the cluster; wide enough to
# center on the full displacement ridge a scale mismatch produces
_MODE_BANDWIDTH = 4.0


def coherent_matches(flow: FlowField, eps: float = 2.0,
                     min_cluster: int = 50) -> MatchSet:
    """Largest displacement-coherent set of flows, lifted to 3-D pairs.

    Mode seeking: displacement vectors are binned at a fixed bandwidth; the
    densest bin seeds a few mean-shift rounds at that same bandwidth, and
    every flow within eps of the final mode joins the cluster.
    """
    if not flow.valid.any():
        raise RegistrationUnreliableError("flow field has no usable cells")
    rows, cols = np.nonzero(flow.valid)
    vec = np.column_stack([flow.du[rows, cols], flow.dv[rows, cols]]).astype(float)

    keys = np.floor(vec / _MODE_BANDWIDTH)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True,
                                  return_counts=True)
    mode = vec[inv == np.argmax(counts)].mean(axis=0)
    for _ in range(5):
        near = np.linalg.norm(vec - mode, axis=1) <= _MODE_BANDWIDTH
        if not near.any():
            break
        mode = vec[near].mean(axis=0)
    members = np.linalg.norm(vec - mode, axis=1) <= eps
    if members.sum() < min_cluster:
        raise RegistrationUnreliableError(
            f"largest coherent cluster has {int(members.sum())} flows,"
            f" below the minimum {min_cluster}"
        )

    mi, mj = rows[members], cols[members]
    ti = mi + flow.dv[mi, mj] + flow.offset[0]
    tj = mj + flow.du[mi, mj] + flow.offset[1]
    ga, gg = flow.source.grid, flow.target.grid
    src = np.column_stack([
        ga.origin[0] + (mj + 0.5) * ga.cell_size,
        ga.origin[1] + (mi + 0.5) * ga.cell_size,
        flow.source.height[mi, mj],
    ])
    tgt = np.column_stack([
        gg.origin[0] + (tj + 0.5) * gg.cell_size,
        gg.origin[1] + (ti + 0.5) * gg.cell_size,
        flow.target.height[ti, tj],
    ])
    return MatchSet(src, tgt)


# ---------------------------------------------------------------------------
# affine estimation

@dataclass
class AffineTransform3D:
    """F(x) = A x + t with a non-singular linear part."""

    A: np.ndarray
    t: np.ndarray
    rmse: float | None = None      # fit residual when estimated from matches

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if abs(np.linalg.det(self.A)) < 1e-12:
            raise ContractViolationError("affine linear part is singular")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.A.T + self.t

    def compose(self, inner: "AffineTransform3D") -> "AffineTransform3D":
        """self o inner: first apply ``inner``, then ``self``."""
        return AffineTransform3D(self.A @ inner.A, self.A @ inner.t + self.t)

    @staticmethod
    def identity() -> "AffineTransform3D":
        return AffineTransform3D(np.eye(3), np.zeros(3))


def estimate_affine(matches: MatchSet) -> AffineTransform3D:
    """Least-squares affine mapping match sources onto match targets."""
    p, q = matches.source, matches.target
    if len(matches) < 4:
        raise RankDeficiencyError("affine estimation needs at least 4 matches")
    M = np.column_stack([p, np.ones(len(matches))])
    if np.linalg.matrix_rank(M) < 4:
        raise RankDeficiencyError("matches are coplanar or otherwise degenerate")
    X, *_ = np.linalg.lstsq(M, q, rcond=None)
    A = X[:3].T
    t = X[3]
    res = M @ X - q
    rmse = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    return AffineTransform3D(A, t, rmse)


# ---------------------------------------------------------------------------
# coherent point drift, affine variant

@dataclass
class CpdResult:
    transform: AffineTransform3D
    sigma2: float
    nll_history: list[float]
    converged: bool
    iterations: int


def cpd_affine(source: np.ndarray, target: np.ndarray, w: float = 0.0,
               max_iterations: int = 100, tol: float = 1e-9,
               sigma2_init: float | None = None) -> CpdResult:
    """EM point-set registration: GMM centroids are the transformed source.

    Returns the affine aligning ``source`` onto ``target``. The negative
    log-likelihood is non-increasing across EM iterations by construction.

    ``sigma2_init`` sets the starting mixture variance. The default derives
    it from all pairwise distances, which suits unaligned sets; when the
    source is already roughly aligned, pass the expected residual scale
    squared instead, or the first E-steps wash the alignment out again.
    """
    X = np.asarray(target, dtype=float).reshape(-1, 3)
    Y = np.asarray(source, dtype=float).reshape(-1, 3)
    if len(X) == 0 or len(Y) == 0:
        raise ContractViolationError("point sets must be nonempty")
    if not 0.0 <= w < 1.0:
        raise ContractViolationError("outlier weight must be in [0, 1)")
    if sigma2_init is not None and sigma2_init <= 0:
        raise ContractViolationError("sigma2_init must be positive")
    N, M, D = len(X), len(Y), 3

    B = np.eye(D)
    t = np.zeros(D)
    TY = Y.copy()
    if sigma2_init is None:
        diff2 = np.sum((X[:, None, :] - TY[None, :, :]) ** 2, axis=2)
        sigma2 = float(diff2.sum()) / (D * M * N)
    else:
        sigma2 = float(sigma2_init)
    nll_history: list[float] = []
    converged = False
    it = 0

    for it in range(1, max_iterations + 1):
        # E-step
        d2 = np.sum((X[:, None, :] - TY[None, :, :]) ** 2, axis=2)
        log_k = -d2 / (2.0 * sigma2) - 0.5 * D * math.log(2.0 * math.pi * sigma2) \
            + math.log((1.0 - w) / M)
        if w > 0:
            vol = np.prod(X.max(axis=0) - X.min(axis=0) + 1e-12)
            log_u = math.log(w / vol)
        else:
            log_u = -np.inf
        mx = np.maximum(log_k.max(axis=1), log_u)
        lse = mx + np.log(
            np.exp(log_k - mx[:, None]).sum(axis=1) + np.exp(log_u - mx)
        )
        nll = -float(lse.sum())
        nll_history.append(nll)
        P = np.exp(log_k - lse[:, None])      # (N, M) responsibilities

        Np = float(P.sum())
        if Np < 1e-12:
            break
        P1 = P.sum(axis=1)                    # (N,)
        Pt1 = P.sum(axis=0)                   # (M,)
        mu_x = (P1 @ X) / Np
        mu_y = (Pt1 @ Y) / Np
        Xh = X - mu_x
        Yh = Y - mu_y
        Bnum = Xh.T @ P @ Yh
        Bden = (Yh * Pt1[:, None]).T @ Yh
        B = Bnum @ np.linalg.inv(Bden)
        t = mu_x - B @ mu_y
        TY = Y @ B.T + t
        trXPX = float(np.sum(P1 * np.sum(Xh * Xh, axis=1)))
        sigma2_new = (trXPX - float(np.trace(Xh.T @ P @ Yh @ B.T))) / (Np * D)
        sigma2 = max(sigma2_new, 1e-12)

        if len(nll_history) >= 2 and abs(nll_history[-2] - nll_history[-1]) < tol * (
            1.0 + abs(nll_history[-1])
        ):
            converged = True
            break
        if sigma2 <= 1e-12:
            converged = True
            break

    return CpdResult(AffineTransform3D(B, t), sigma2, nll_history, converged, it)


# ---------------------------------------------------------------------------
# full pipeline

def _grid_bounds(mm: MultimodalGrid) -> tuple:
    h, w = mm.shape
    ox, oy = mm.grid.origin
    cs = mm.grid.cell_size
    return ox, oy, ox + w * cs, oy + h * cs


def _in_footprint(mm: MultimodalGrid, pts: np.ndarray, dilate: int = 0) -> np.ndarray:
    """True for points whose xy falls on a valid cell of the grid.

    ``dilate`` grows the footprint by that many cells, tolerating small
    residual misalignment at the edges.
    """
    mask = mm.valid
    if dilate > 0:
        from scipy.ndimage import binary_dilation
        mask = binary_dilation(mask, iterations=dilate)
    cs = mm.grid.cell_size
    col = np.floor((pts[:, 0] - mm.grid.origin[0]) / cs).astype(int)
    row = np.floor((pts[:, 1] - mm.grid.origin[1]) / cs).astype(int)
    h, w = mm.shape
    ok = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    out = np.zeros(len(pts), dtype=bool)
    out[ok] = mask[row[ok], col[ok]]
    return out


@dataclass
class RegistrationConfig:
    match_cell_size: float = 0.08      # shared raster resolution for matching
    cell_size: float = 0.04            # reporting resolution (RMSE gate unit)
    flow: FlowParams = field(default_factory=FlowParams)
    # wider than the coherent_matches default: under a scale error the true
    # displacement field spreads, and the affine fit wants that full spread
    cluster_eps: float = 4.0
    min_cluster: int = 50
    crop_margin: float = 3.0           # aerial crop around the ground extent
    cpd_w: float = 0.1
    cpd_max_iterations: int = 80
    cpd_sigma: float = 0.25            # expected residual scale after F-hat, m
    subsample: int = 1500              # CPD point budget per cloud
    det_range: tuple = (0.5, 2.0)      # plausible |det A| for this domain


@dataclass
class RegistrationResult:
    transform: AffineTransform3D       # maps aerial points onto ground points
    rmse: float                        # vegetation nearest-neighbor RMSE
    n_matches: int
    coarse: AffineTransform3D
    cpd: CpdResult


def _subsample(pts: np.ndarray, limit: int, rng) -> np.ndarray:
    if len(pts) <= limit:
        return pts
    idx = rng.choice(len(pts), size=limit, replace=False)
    return pts[np.sort(idx)]


def register(m_a: ColoredCloud, m_g: ColoredCloud,
             cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate the affine transform carrying the aerial cloud onto the
    ground cloud, and the vegetation-point alignment RMSE under it."""
    cfg = cfg or RegistrationConfig()
    j_g = build_grid(m_g, cfg.match_cell_size)

    # the geo-tags roughly co-locate the clouds, so only the aerial region
    # around the ground map can hold true matches; cropping before matching
    # keeps self-similar far-field rows from forming spurious flow clusters
    xmin, ymin, xmax, ymax = _grid_bounds(j_g)
    m = cfg.crop_margin
    pts = m_a.points
    keep = ((pts[:, 0] >= xmin - m) & (pts[:, 0] <= xmax + m)
            & (pts[:, 1] >= ymin - m) & (pts[:, 1] <= ymax + m))
    if not keep.any():
        raise RegistrationUnreliableError(
            "clouds do not overlap within the crop margin"
        )
    m_a_crop = ColoredCloud(pts[keep], m_a.colors[keep], m_a.geo_tag)

    j_a = build_grid(m_a_crop, cfg.match_cell_size)
    flow = match_flow(j_a, j_g, cfg.flow)
    matches = coherent_matches(flow, cfg.cluster_eps, cfg.min_cluster)
    coarse = estimate_affine(matches)
    # the cluster still carries aliased matches; re-select by fit residual
    for _ in range(2):
        r = np.linalg.norm(coarse.apply(matches.source) - matches.target,
                           axis=1)
        keep = r <= max(3.0 * float(np.median(r)), 1e-6)
        if keep.all() or keep.sum() < max(4, cfg.min_cluster // 2):
            break
        matches = MatchSet(matches.source[keep], matches.target[keep])
        coarse = estimate_affine(matches)

    lo, hi = cfg.det_range
    if not lo <= abs(np.linalg.det(coarse.A)) <= hi:
        raise RegistrationUnreliableError(
            "preliminary affine has an implausible scale"
        )

    veg_a = vegetation_filter(m_a).points
    veg_g = vegetation_filter(m_g).points
    if len(veg_a) == 0 or len(veg_g) == 0:
        raise RegistrationUnreliableError("no vegetation points to refine on")

    # restrict the aerial side to the ground map's observed footprint: CPD
    # should refine the overlap, not drag the whole field onto the strip
    moved = coarse.apply(veg_a)
    inside = _in_footprint(j_g, moved, dilate=4)
    if inside.sum() < cfg.min_cluster:
        raise RegistrationUnreliableError("clouds barely overlap after coarse fit")

    rng = np.random.default_rng([cfg.flow.seed, 7])
    src = _subsample(moved[inside], cfg.subsample, rng)
    tgt = _subsample(veg_g, cfg.subsample, rng)
    cpd = cpd_affine(src, tgt, cfg.cpd_w, cfg.cpd_max_iterations,
                     sigma2_init=cfg.cpd_sigma**2)
    final = cpd.transform.compose(coarse)

    if not lo <= abs(np.linalg.det(final.A)) <= hi:
        raise RegistrationUnreliableError("refined affine has an implausible scale")

    # report alignment quality over the overlap: aerial vegetation that
    # lands on observed ground cells, against the ground vegetation points
    aligned = final.apply(veg_a)
    inside = _in_footprint(j_g, aligned)
    if not inside.any():
        raise RegistrationUnreliableError("no aligned vegetation in the overlap")
    tree = cKDTree(veg_g)
    dists, _ = tree.query(aligned[inside])
    rmse = float(np.sqrt(np.mean(dists**2)))
    final.rmse = rmse
    return RegistrationResult(final, rmse, len(matches), coarse, cpd)
