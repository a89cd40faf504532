"""Diagnose the seed-1 register failure: what wins the coherent cluster?"""
import numpy as np

import agrisim.registration as reg
from proto_reg2 import field_cloud, misalign

seed = 1
m_a = field_cloud(seed, 0.08, render_seed=100000 + seed)
strip = field_cloud(seed, 0.02, strip=(3.2, 6.8), render_seed=200000 + seed)
A, tt = misalign()
m_g = strip.transformed(lambda p: p @ A.T + tt)

ja = reg.build_grid(m_a, 0.08)
jg = reg.build_grid(m_g, 0.08)
print("ja", ja.shape, "valid", ja.valid.mean(), "origin", ja.grid.origin)
print("jg", jg.shape, "valid", jg.valid.mean(), "origin", jg.grid.origin)

flow = reg.match_flow(ja, jg)
print("offset", flow.offset, "valid flows", flow.valid.sum())

# planted truth flow for A cells inside the strip in world coords
cs = 0.08
H, W = ja.shape
ii, jj = np.mgrid[0:H, 0:W]
px = ja.grid.origin[0] + (jj + 0.5) * cs
py = ja.grid.origin[1] + (ii + 0.5) * cs
pz = ja.height
P = np.dstack([px, py, pz])
Q = P @ A.T + tt
in_strip = (py >= 3.2) & (py <= 6.8)
# target index for truth
tr = (Q[..., 1] - jg.grid.origin[1]) / cs - 0.5
tc = (Q[..., 0] - jg.grid.origin[0]) / cs - 0.5
truth_dv = np.round(tr).astype(int) - ii - flow.offset[0]
truth_du = np.round(tc).astype(int) - jj - flow.offset[1]
print("truth flow range in strip: du", truth_du[in_strip].min(),
      truth_du[in_strip].max(), "dv", truth_dv[in_strip].min(),
      truth_dv[in_strip].max())

sel = flow.valid & in_strip
agree = (np.abs(flow.du - truth_du) <= 1) & (np.abs(flow.dv - truth_dv) <= 1)
print("in-strip flows within 1 of truth:", agree[sel].mean(),
      "n in-strip:", sel.sum())

ms = reg.coherent_matches(flow)
print("cluster size:", len(ms))
src = ms.source
print("member y range:", src[:, 1].min(), src[:, 1].max(),
      "x range:", src[:, 0].min(), src[:, 0].max())
print("member z range:", src[:, 2].min(), src[:, 2].max())
frac_in = ((src[:, 1] >= 3.2) & (src[:, 1] <= 6.8)).mean()
print("members inside strip:", frac_in)
d = ms.target - ms.source
print("delta mean:", d.mean(axis=0), "std:", d.std(axis=0))
try:
    F = reg.estimate_affine(ms)
    print("coarse det:", np.linalg.det(F.A), "rmse:", F.rmse)
    print("A=\n", F.A)
except Exception as e:
    print("estimate_affine:", type(e).__name__, e)
