import time
import numpy as np
from agrisim.errors import InsufficientStructureError
from agrisim.temporal import temporal_descriptor, temporal_match
from proto_temporal import planted

rng = np.random.default_rng(7)
stems = rng.uniform(0, 10, (60, 2))
d = temporal_descriptor(stems, 12)
d4 = temporal_descriptor(stems * 4.0, 12)
print("scale x4 exact:", np.array_equal(d, d4))
ang = 0.9
R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
dr = temporal_descriptor(stems @ R.T, 12)
print("rotation close:", np.max(np.abs(d - dr)))

m = temporal_match(stems, stems.copy())
ident = all(i == j for i, j in m.pairs)
print("identity:", len(m.pairs), "pairs, identity mapping", ident,
      f"scale {m.transform.scale:.6f}")

try:
    temporal_match(stems[:4], stems[:4])
    print("too-few: no raise (BAD)")
except InsufficientStructureError as e:
    print("too-few raises:", e)

t0 = time.time()
for seed in range(20):
    s0, s1, tj, ns = planted(seed, 0.02)
    temporal_match(s0, s1)
print(f"20 planted matches: {time.time()-t0:.1f} s")
