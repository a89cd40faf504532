import numpy as np
from agrisim.temporal import temporal_match


def planted(seed, jitter):
    rng = np.random.default_rng([seed, 42])
    xs = np.arange(0.1, 8.0, 0.2)
    ys = np.arange(0.25, 6.0, 0.5)
    gx, gy = np.meshgrid(xs, ys)
    s0 = np.column_stack([gx.ravel(), gy.ravel()])
    s0 = s0 + rng.normal(0.0, jitter, s0.shape)
    keep = rng.random(len(s0)) >= 0.2
    surv = np.flatnonzero(keep)
    ang = np.deg2rad(20.0)
    R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    s1 = 1.3 * (s0[surv] @ R.T) + np.array([2.0, -1.0])
    s1 = s1 + rng.normal(0.0, 0.01, s1.shape)
    perm = rng.permutation(len(s1))
    s1 = s1[perm]
    true_j = np.full(len(s0), -1, dtype=int)
    inv = np.argsort(perm)
    true_j[surv] = inv   # s0[surv[m]] -> s1[inv[m]]
    return s0, s1, true_j, len(surv)


if __name__ == "__main__":
    for jitter in (0.02, 0.04):
        fracs, serrs, npairs = [], [], []
        for seed in range(20):
            s0, s1, true_j, n_surv = planted(seed, jitter)
            m = temporal_match(s0, s1)
            correct = sum(1 for i, j in m.pairs if true_j[i] == j)
            fracs.append(correct / n_surv)
            serrs.append(abs(m.transform.scale - 1.3))
            npairs.append(len(m.pairs))
        print(f"jitter {jitter}: frac min {min(fracs):.3f} mean {np.mean(fracs):.3f}"
              f" | scale err max {max(serrs):.4f}"
              f" | pairs min {min(npairs)} (surv {n_surv})")
