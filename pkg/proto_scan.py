"""Scan match_cell_size for flow agreement / coarse quality / final RMSE."""
import sys
import time

import numpy as np

import agrisim.registration as reg
from agrisim.grids import ColoredCloud
from agrisim import fieldgen


def field_cloud(seed, cell_size, strip=None, render_seed=None):
    spec = fieldgen.FieldSpec(
        extent=(10.0, 10.0), row_spacing=0.5, seed=seed, weed_density=2.0,
        terrain=fieldgen.TerrainParams(base_altitude=0.0,
                                       roughness_amplitude=0.3,
                                       correlation_length=3.0))
    truth = fieldgen.generate(spec)
    grid = fieldgen.render_grid(truth, cell_size=cell_size, seed=render_seed)
    cc = grid.cell_centers()
    z = grid.layer("height")
    r, g, b = grid.layer("r"), grid.layer("g"), grid.layer("b")
    pts = np.dstack([cc, z[..., None]]).reshape(-1, 3)
    cols = np.dstack([r[..., None], g[..., None], b[..., None]]).reshape(-1, 3)
    if strip is not None:
        keep = (pts[:, 1] >= strip[0]) & (pts[:, 1] <= strip[1])
        pts, cols = pts[keep], cols[keep]
    return ColoredCloud(pts, np.clip(cols, 0, 1))


def misalign():
    th = np.radians(3.0)
    s = 1.1
    R = np.array([[np.cos(th), -np.sin(th), 0],
                  [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
    return s * R, np.array([0.9, -1.2, 0.0])


def agreement(cfg, m_a, m_g, A, tt):
    j_g = reg.build_grid(m_g, cfg.match_cell_size)
    xmin, ymin, xmax, ymax = reg._grid_bounds(j_g)
    mm = cfg.crop_margin
    pts = m_a.points
    keep = ((pts[:, 0] >= xmin - mm) & (pts[:, 0] <= xmax + mm)
            & (pts[:, 1] >= ymin - mm) & (pts[:, 1] <= ymax + mm))
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
    ok = (np.abs(flow.du - tdu) <= 1) & (np.abs(flow.dv - tdv) <= 1)
    return ok[sel].mean()

