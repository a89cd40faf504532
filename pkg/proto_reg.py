"""Stage-by-stage prototype of the registration pipeline."""
import time

import numpy as np

import agrisim.registration as reg
from agrisim.grids import ColoredCloud
from agrisim import fieldgen

t0 = time.time()

# --- build_grid basics
c1 = ColoredCloud([[0.5, 0.5, 2.0]], [[0.2, 0.6, 0.1]])
g1 = reg.build_grid(c1, 1.0)
print("single point:", g1.shape, g1.valid.sum(), g1.height[g1.valid],
      g1.exg[g1.valid], "expect exg", 2 * 0.6 - 0.2 - 0.1)

c2 = ColoredCloud([[0.2, 0.2, 1.0], [0.8, 0.8, 3.0]],
                  [[0.1, 0.5, 0.1], [0.3, 0.7, 0.3]])
g2 = reg.build_grid(c2, 1.0)
print("two points one cell: h =", g2.height[g2.valid], "expect 2.0")

# permutation invariance
rng = np.random.default_rng(0)
pts = rng.uniform(0, 5, (500, 3))
cols = rng.uniform(0, 1, (500, 3))
perm = rng.permutation(500)
ga = reg.build_grid(ColoredCloud(pts, cols), 0.5)
gb = reg.build_grid(ColoredCloud(pts[perm], cols[perm]), 0.5)
print("permutation invariant:", np.allclose(ga.height, gb.height),
      np.allclose(ga.exg, gb.exg), np.array_equal(ga.valid, gb.valid))

# --- synthesize a field cloud for flow tests
spec = fieldgen.FieldSpec(extent=(10.0, 10.0), row_spacing=0.5, seed=3)
truth = fieldgen.generate(spec)
grid = fieldgen.render_grid(truth, cell_size=0.08, seed=11)
H, W = grid.shape
cc = grid.cell_centers().reshape(-1, 2)
z = grid.layer("height").reshape(-1)
r = grid.layer("r").reshape(-1)
g = grid.layer("g").reshape(-1)
b = grid.layer("b").reshape(-1)
cloud = ColoredCloud(np.column_stack([cc, z]),
                     np.clip(np.column_stack([r, g, b]), 0, 1))
print("cloud size:", len(cloud), "render shape:", grid.shape,
      f"[{time.time()-t0:.1f}s]")

ja = reg.build_grid(cloud, 0.08)
print("grid shape:", ja.shape, "valid frac:", ja.valid.mean())

# --- flow: self match
t1 = time.time()
flow = reg.match_flow(ja, ja)
zero = (flow.du[flow.valid] == 0) & (flow.dv[flow.valid] == 0)
print(f"self-match zero-flow frac: {zero.mean():.3f} cost~{np.median(flow.cost[flow.valid]):.2e}",
      f"[{time.time()-t1:.1f}s]")

# --- flow: planted shift by (12, -7) cells
# shift cloud by (12 cells * 0.08, -7 * 0.08)
dx, dy = 12 * 0.08, -7 * 0.08
cloud_shift = cloud.transformed(lambda p: p + np.array([dx, dy, 0.0]))
jg = reg.build_grid(cloud_shift, 0.08)
t1 = time.time()
flow = reg.match_flow(ja, jg)
mu = np.median(flow.du[flow.valid])
mv = np.median(flow.dv[flow.valid])
print(f"planted shift: median flow ({mu}, {mv}) expect (12, -7)",
      f"[{time.time()-t1:.1f}s]")

# --- coherent matches on that flow
ms = reg.coherent_matches(flow)
print("coherent cluster size:", len(ms), "of", int(flow.valid.sum()))
delta = ms.target - ms.source
print("  mean delta:", delta.mean(axis=0), "expect ~(0.96, -0.56, 0)")

# --- estimate_affine: planted exact transform
rng = np.random.default_rng(1)
P = rng.uniform(0, 10, (200, 3))
A0 = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
t0v = rng.uniform(-1, 1, 3)
Q = P @ A0.T + t0v
F = reg.estimate_affine(reg.MatchSet(P, Q))
print("affine recovery err:", np.abs(F.A - A0).max(), np.abs(F.t - t0v).max(),
      "rmse:", F.rmse)

# degenerate: coplanar
try:
    Pc = P.copy()
    Pc[:, 2] = 1.0
    reg.estimate_affine(reg.MatchSet(Pc, Pc))
    print("coplanar: NO ERROR (bad)")
except Exception as e:
    print("coplanar raises:", type(e).__name__)

# --- cpd: identity
X = rng.uniform(0, 5, (300, 3))
res = reg.cpd_affine(X, X)
print("cpd identity: A err", np.abs(res.transform.A - np.eye(3)).max(),
      "t err", np.abs(res.transform.t).max(), "sigma2", res.sigma2,
      "iters", res.iterations, "converged", res.converged)
mono = all(res.nll_history[i + 1] <= res.nll_history[i] + 1e-9
           for i in range(len(res.nll_history) - 1))
print("  nll monotone:", mono)

# --- cpd: planted affine
A1 = np.eye(3) + 0.05 * rng.standard_normal((3, 3))
t1v = rng.uniform(-0.5, 0.5, 3)
Y = rng.uniform(0, 5, (300, 3))
Xp = Y @ A1.T + t1v
res = reg.cpd_affine(Y, Xp, w=0.0)
print("cpd planted: A err", np.abs(res.transform.A - A1).max(),
      "t err", np.abs(res.transform.t - t1v).max(), "converged", res.converged)
mono = all(res.nll_history[i + 1] <= res.nll_history[i] + 1e-9
           for i in range(len(res.nll_history) - 1))
print("  nll monotone:", mono)

# --- cpd: outliers
out = rng.uniform(-2, 7, (60, 3))
Xo = np.vstack([Xp, out])
res = reg.cpd_affine(Y, Xo, w=0.2)
print("cpd outliers: A err", np.abs(res.transform.A - A1).max(),
      "t err", np.abs(res.transform.t - t1v).max(), "converged", res.converged)
mono = all(res.nll_history[i + 1] <= res.nll_history[i] + 1e-9
           for i in range(len(res.nll_history) - 1))
print("  nll monotone:", mono)

print(f"total {time.time()-t0:.1f}s")
