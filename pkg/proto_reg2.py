"""Flow-level planted tests + full register() on the misalignment scenario."""
import time

import numpy as np

import agrisim.registration as reg
from agrisim.grids import ColoredCloud, GridMap2D
from agrisim import fieldgen

t0 = time.time()


def field_cloud(seed, cell_size, strip=None, render_seed=None):
    spec = fieldgen.FieldSpec(
        extent=(10.0, 10.0), row_spacing=0.5, seed=seed, weed_density=2.0,
        terrain=fieldgen.TerrainParams(base_altitude=0.0,
                                       roughness_amplitude=0.3,
                                       correlation_length=3.0),
    )
    truth = fieldgen.generate(spec)
    grid = fieldgen.render_grid(truth, cell_size=cell_size, seed=render_seed)
    cc = grid.cell_centers()
    z = grid.layer("height")
    r, g, b = grid.layer("r"), grid.layer("g"), grid.layer("b")
    pts = np.dstack([cc, z[..., None]]).reshape(-1, 3)
    cols = np.dstack([r[..., None], g[..., None], b[..., None]]).reshape(-1, 3)
    if strip is not None:
        lo, hi = strip
        keep = (pts[:, 1] >= lo) & (pts[:, 1] <= hi)
        pts, cols = pts[keep], cols[keep]
    return ColoredCloud(pts, np.clip(cols, 0, 1))


# --- content-shift planted flow: same origin, rolled arrays
cloud = field_cloud(3, 0.08, render_seed=11)
ja = reg.build_grid(cloud, 0.08)
dx, dyy = 12, -7
hgt = np.roll(ja.height, (-dyy, dx), axis=(0, 1))
exg = np.roll(ja.exg, (-dyy, dx), axis=(0, 1))
# hmm: G[i, j] should equal A[i - dy, j - dx] so that A(i,j) matches G(i+dy, j+dx)
hgt = np.roll(ja.height, (dyy, dx), axis=(0, 1))
exg = np.roll(ja.exg, (dyy, dx), axis=(0, 1))
val = np.roll(ja.valid, (dyy, dx), axis=(0, 1))
# invalidate wrapped bands
val2 = val.copy()
if dyy < 0:
    val2[dyy:, :] = False
else:
    val2[:dyy, :] = False
val2[:, :dx] = False
jg = reg.MultimodalGrid(GridMap2D(ja.grid.origin, 0.08,
                                  {"height": hgt, "exg": exg}), val2)
t1 = time.time()
flow = reg.match_flow(ja, jg)
mu = np.median(flow.du[flow.valid])
mv = np.median(flow.dv[flow.valid])
frac = ((np.abs(flow.du[flow.valid] - dx) <= 1)
        & (np.abs(flow.dv[flow.valid] - dyy) <= 1)).mean()
print(f"content shift: median ({mu}, {mv}) expect (12, -7); within1 {frac:.3f}",
      f"[{time.time()-t1:.1f}s]")

# --- 20% noise cells
rng = np.random.default_rng(0)
noise = rng.random(jg.valid.shape) < 0.2
hgt2 = np.where(noise, rng.uniform(0, 0.5, jg.valid.shape), hgt)
exg2 = np.where(noise, rng.uniform(-0.2, 1.2, jg.valid.shape), exg)
jg2 = reg.MultimodalGrid(GridMap2D(ja.grid.origin, 0.08,
                                   {"height": hgt2, "exg": exg2}), val2)
flow2 = reg.match_flow(ja, jg2)
mu2 = np.median(flow2.du[flow2.valid])
mv2 = np.median(flow2.dv[flow2.valid])
print(f"noisy shift: median ({mu2}, {mv2}) expect (12, -7)")

# --- coherent_matches world-coordinate check on planted flow
ms = reg.coherent_matches(flow)
delta = (ms.target - ms.source)
print("coherent delta mean:", delta.mean(axis=0),
      "expect (0.96, -0.56, ~0); n =", len(ms))

# --- synthetic cluster recall 70/30
hh, ww = 60, 60
rng = np.random.default_rng(5)
du = np.full((hh, ww), 12)
dv = np.full((hh, ww), -7)
rand = rng.random((hh, ww)) < 0.3
du = np.where(rand, rng.integers(-24, 25, (hh, ww)), du)
dv = np.where(rand, rng.integers(-24, 25, (hh, ww)), dv)
big = reg.MultimodalGrid(
    GridMap2D((0, 0), 0.08, {"height": np.zeros((90, 90)),
                             "exg": np.zeros((90, 90))}),
    np.ones((90, 90), dtype=bool))
small = reg.MultimodalGrid(
    GridMap2D((0, 0), 0.08, {"height": np.zeros((hh, ww)),
                             "exg": np.zeros((hh, ww))}),
    np.ones((hh, ww), dtype=bool))
ff = reg.FlowField(du, dv, np.zeros((hh, ww)), np.ones((hh, ww), bool),
                   (0, 0), small, big)
ms2 = reg.coherent_matches(ff)
planted = ~rand
sel = np.zeros((hh, ww), bool)
# recompute membership from match sources
src_idx = ((ms2.source[:, 1] / 0.08 - 0.5).round().astype(int),
           (ms2.source[:, 0] / 0.08 - 0.5).round().astype(int))
sel[src_idx] = True
recall = (sel & planted).sum() / planted.sum()
prec = (sel & planted).sum() / max(sel.sum(), 1)
print(f"cluster recall {recall:.3f} precision {prec:.3f} (want recall >= 0.9)")

# --- pure random flow -> unreliable
du = rng.integers(-24, 25, (30, 30))
dv = rng.integers(-24, 25, (30, 30))
small2 = reg.MultimodalGrid(
    GridMap2D((0, 0), 0.08, {"height": np.zeros((30, 30)),
                             "exg": np.zeros((30, 30))}),
    np.ones((30, 30), dtype=bool))
ff2 = reg.FlowField(du, dv, np.zeros((30, 30)), np.ones((30, 30), bool),
                    (0, 0), small2, big)
try:
    reg.coherent_matches(ff2)
    print("pure random: NO ERROR (bad)")
except Exception as e:
    print("pure random raises:", type(e).__name__)

# --- full register on the planted misalignment scenario
def misalign():
    th = np.radians(3.0)
    s = 1.1
    R = np.array([[np.cos(th), -np.sin(th), 0],
                  [np.sin(th), np.cos(th), 0],
                  [0, 0, 1.0]])
    A = s * R
    t = np.array([0.9, -1.2, 0.0])
    return A, t

for seed in range(3):
    t1 = time.time()
    m_a = field_cloud(seed, 0.08, render_seed=100000 + seed)
    strip = field_cloud(seed, 0.02, strip=(3.2, 6.8), render_seed=200000 + seed)
    A, tt = misalign()
    m_g = strip.transformed(lambda p: p @ A.T + tt)
    try:
        res = reg.register(m_a, m_g)
        errA = np.abs(res.transform.A - A).max()
        errt = np.abs(res.transform.t - tt).max()
        print(f"seed {seed}: rmse {res.rmse:.4f} matches {res.n_matches} "
              f"A err {errA:.3f} t err {errt:.3f} "
              f"coarse rmse {res.coarse.rmse:.3f} cpd iters {res.cpd.iterations} "
              f"[{time.time()-t1:.1f}s]")
    except Exception as e:
        print(f"seed {seed}: {type(e).__name__}: {e} [{time.time()-t1:.1f}s]")

print(f"total {time.time()-t0:.1f}s")
