import numpy as np
from scipy.spatial import cKDTree
from agrisim.temporal import _all_descriptors, _irls_similarity
from proto_temporal import planted

for jitter in (0.02, 0.04):
    stats = []
    for seed in range(5):
        s0, s1, true_j, n_surv = planted(seed, jitter)
        d0 = _all_descriptors(s0, 6)
        d1 = _all_descriptors(s1, 6)
        t0 = cKDTree(d0); t1 = cKDTree(d1)
        dist01, nn01 = t1.query(d0, k=2)
        _, nn10 = t0.query(d1, k=1)
        seeds, good = [], 0
        for i in range(len(s0)):
            j = int(nn01[i, 0])
            if int(nn10[j]) != i:
                continue
            if dist01[i, 1] > 0 and dist01[i, 0] / dist01[i, 1] > 0.8:
                continue
            seeds.append((i, j))
            good += int(true_j[i] == j)
        stats.append((len(seeds), good))
    print(f"jitter {jitter}: (n_seeds, n_correct) per seed:", stats)
