"""Post-crop diagnosis: flow agreement, cluster quality, coarse fit, CPD."""
import numpy as np

import agrisim.registration as reg
from agrisim.grids import ColoredCloud
from agrisim.spectral import vegetation_filter
from proto_reg2 import field_cloud, misalign

for seed in (0, 1):
    m_a = field_cloud(seed, 0.08, render_seed=100000 + seed)
    strip = field_cloud(seed, 0.02, strip=(3.2, 6.8), render_seed=200000 + seed)
    A, tt = misalign()
    m_g = strip.transformed(lambda p: p @ A.T + tt)

    cfg = reg.RegistrationConfig()
    j_g = reg.build_grid(m_g, cfg.match_cell_size)
    xmin, ymin, xmax, ymax = reg._grid_bounds(j_g)
    m = cfg.crop_margin
    pts = m_a.points
    keep = ((pts[:, 0] >= xmin - m) & (pts[:, 0] <= xmax + m)
            & (pts[:, 1] >= ymin - m) & (pts[:, 1] <= ymax + m))
    m_a_c = ColoredCloud(pts[keep], m_a.colors[keep])
    j_a = reg.build_grid(m_a_c, cfg.match_cell_size)
    flow = reg.match_flow(j_a, j_g, cfg.flow)

    cs = cfg.match_cell_size
    H, W = j_a.shape
    ii, jj = np.mgrid[0:H, 0:W]
    px = j_a.grid.origin[0] + (jj + 0.5) * cs
    py = j_a.grid.origin[1] + (ii + 0.5) * cs
    P = np.dstack([px, py, j_a.height])
    Q = P @ A.T + tt
    tr = (Q[..., 1] - j_g.grid.origin[1]) / cs - 0.5
    tc = (Q[..., 0] - j_g.grid.origin[0]) / cs - 0.5
    tdv = np.round(tr).astype(int) - ii - flow.offset[0]
    tdu = np.round(tc).astype(int) - jj - flow.offset[1]
    in_strip = (py >= 3.3) & (py <= 6.7)
    sel = flow.valid & in_strip
    agree = (np.abs(flow.du - tdu) <= 1) & (np.abs(flow.dv - tdv) <= 1)
    print(f"seed {seed}: in-strip agree {agree[sel].mean():.3f}"
          f" (n={sel.sum()}), truth du {tdu[sel].min()}..{tdu[sel].max()}"
          f" dv {tdv[sel].min()}..{tdv[sel].max()}")

    ms = reg.coherent_matches(flow, cfg.cluster_eps, cfg.min_cluster)
    src = ms.source
    d = ms.target - ms.source
    # members that are correct matches per truth
    prow = ((src[:, 1] - j_a.grid.origin[1]) / cs - 0.5).round().astype(int)
    pcol = ((src[:, 0] - j_a.grid.origin[0]) / cs - 0.5).round().astype(int)
    good = agree[prow, pcol]
    print(f"  cluster n={len(ms)} good-frac {good.mean():.3f}"
          f" y {src[:,1].min():.2f}..{src[:,1].max():.2f}"
          f" x {src[:,0].min():.2f}..{src[:,0].max():.2f}"
          f" z {src[:,2].min():.2f}..{src[:,2].max():.2f}")
    F = reg.estimate_affine(ms)
    print(f"  coarse: det {np.linalg.det(F.A):.3f} rmse {F.rmse:.3f}"
          f" A err {np.abs(F.A - A).max():.3f} t err {np.abs(F.t - tt).max():.3f}")

    # oracle: coarse fit from TRUTH matches of the in-strip region
    gi = np.nonzero(sel & agree)
    src_t = np.column_stack([px[gi], py[gi], j_a.height[gi]])
    tgt_t = src_t @ A.T + tt
    Fo = reg.estimate_affine(reg.MatchSet(src_t, tgt_t))
    print(f"  oracle-from-true-matches: A err {np.abs(Fo.A - A).max():.4f}")

    # what does CPD do when started from the TRUE transform?
    veg_a = vegetation_filter(m_a_c).points
    veg_g = vegetation_filter(m_g).points
    moved = veg_a @ A.T + tt
    rng = np.random.default_rng(7)
    bb_lo = veg_g.min(axis=0) - 0.32
    bb_hi = veg_g.max(axis=0) + 0.32
    inside = np.all((moved >= bb_lo) & (moved <= bb_hi), axis=1)
    sub = lambda x: x[rng.choice(len(x), min(1500, len(x)), replace=False)]
    cpd = reg.cpd_affine(sub(moved[inside]), sub(veg_g), 0.1, 80)
    print(f"  cpd-from-truth: A err {np.abs(cpd.transform.A - np.eye(3)).max():.4f}"
          f" t err {np.abs(cpd.transform.t).max():.4f} iters {cpd.iterations}")
