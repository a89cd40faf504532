"""Registration scenario with a realistically irregular field."""
import time

import numpy as np

import agrisim.registration as reg
from agrisim.grids import ColoredCloud
from agrisim import fieldgen
from proto_scan import agreement, misalign


def field_cloud(seed, cell_size, strip=None, render_seed=None):
    spec = fieldgen.FieldSpec(
        extent=(10.0, 10.0), row_spacing=0.5, seed=seed,
        lattice_jitter_sigma=0.04,
        crop_radius_range=(0.03, 0.08),
        weed_density=2.0,
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


if __name__ == "__main__":
    for seed in range(5):
        t1 = time.time()
        m_a = field_cloud(seed, 0.04, render_seed=100000 + seed)
        strip = field_cloud(seed, 0.02, strip=(3.2, 6.8),
                            render_seed=200000 + seed)
        A, tt = misalign()
        m_g = strip.transformed(lambda p: p @ A.T + tt)
        cfg = reg.RegistrationConfig()
        agr = agreement(cfg, m_a, m_g, A, tt)
        try:
            res = reg.register(m_a, m_g, cfg)
            errA = np.abs(res.transform.A - A).max()
            errt = np.abs(res.transform.t - tt).max()
            print(f"seed {seed}: agree {agr:.3f} rmse {res.rmse:.4f}"
                  f" A err {errA:.3f} t err {errt:.3f}"
                  f" coarse A err {np.abs(res.coarse.A - A).max():.3f}"
                  f" n {res.n_matches} [{time.time()-t1:.1f}s]")
        except Exception as e:
            print(f"seed {seed}: agree {agr:.3f}"
                  f" {type(e).__name__} [{time.time()-t1:.1f}s]")
