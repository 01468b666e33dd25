"""Independent reference implementations used as test oracles.

Each oracle computes its quantity by a different route than the package
(pair counting, brute-force enumeration, dense linear algebra) so that
agreement is evidence rather than repetition.
"""
import itertools
from collections import Counter
from fractions import Fraction

import numpy as np


def gini_by_pair_counting(labels):
    """Probability that two draws with replacement disagree, as a Fraction."""
    labels = list(labels)
    n = len(labels)
    differ = sum(1 for a in labels for b in labels if a != b)
    return Fraction(differ, n * n)


def partition_gini_by_pair_counting(subsets):
    total = sum(len(s) for s in subsets)
    acc = Fraction(0)
    for s in subsets:
        if s:
            acc += Fraction(len(s), total) * gini_by_pair_counting(s)
    return acc


def entropy_high_precision(labels):
    """Shannon entropy in bits with 60-digit arithmetic."""
    import mpmath
    mpmath.mp.dps = 60
    counts = Counter(labels)
    n = sum(counts.values())
    h = mpmath.mpf(0)
    for c in counts.values():
        p = mpmath.mpf(c) / n
        h -= p * mpmath.log(p, 2)
    return h


def msda_unpenalised(cov, delta):
    """Directions with no penalty: ``theta_c = S^-1 delta_c``."""
    return np.linalg.solve(cov, delta.T).T


def kkt_residual(cov, delta, theta, lam):
    """Group-Lasso optimality residual computed from the dense gradient."""
    grad = theta @ cov - delta
    worst = 0.0
    for h in range(cov.shape[0]):
        t = theta[:, h]
        g = grad[:, h]
        norm = np.sqrt(t @ t)
        if norm > 0:
            worst = max(worst, float(np.sqrt(np.sum((g + lam * t / norm) ** 2))))
        else:
            worst = max(worst, max(0.0, float(np.sqrt(g @ g)) - lam))
    return worst


def brute_pyramid(dims, n_lay):
    """Enumerate patches by scanning every origin; returns per-layer dicts."""
    layers = {}
    for r in range(n_lay + 1):
        side = 1 if r == 0 else 3 * 2 ** (r - 1)
        overlap = 0.0 if r == 0 else 1.0 - 0.5 ** (r - 1)
        stride = int(round(side * (1.0 - overlap)))
        per_axis = [[o for o in range(0, d - side + 1) if o % stride == 0] for d in dims]
        origins = [(x, y, z) for z in per_axis[2] for y in per_axis[1] for x in per_axis[0]]
        layers[r] = {"side": side, "stride": stride, "origins": origins,
                     "per_axis": [len(a) for a in per_axis]}
    return layers


def brute_neighbors(origins, stride):
    index = {o: i for i, o in enumerate(origins)}
    out = []
    for o in origins:
        nb = set()
        for d in itertools.product((-1, 0, 1), repeat=3):
            if d == (0, 0, 0):
                continue
            q = tuple(o[a] + d[a] * stride for a in range(3))
            if q in index:
                nb.add(index[q])
        out.append(nb)
    return out


def stop_index_reference(scores, window=20, max_trials=200):
    """Number of trials run under the sliding-window rule.

    ``scores`` may contain ``None`` for failed trials.
    """
    completed = []
    for i, s in enumerate(scores[:max_trials]):
        if s is None:
            continue
        prev = completed[-window:]
        if prev and not s > max(prev):
            return i + 1
        completed.append(s)
    return min(len(scores), max_trials)


def macro_metrics_by_loops(pred, ref, foreground):
    precs, recs = [], []
    for c in foreground:
        tp = fp = fn = 0
        for p, r in zip(pred, ref):
            if p == c and r == c:
                tp += 1
            elif p == c:
                fp += 1
            elif r == c:
                fn += 1
        precs.append(tp / (tp + fp) if tp + fp else (0.0 if tp + fn else 1.0))
        recs.append(tp / (tp + fn) if tp + fn else 1.0)
    return sum(precs) / len(precs), sum(recs) / len(recs)


def spd_fixture(seed, n_feat=None, n_clas=None):
    """Random SPD covariance and class-mean differences."""
    rng = np.random.default_rng(seed)
    p = int(n_feat or rng.integers(2, 31))
    k = int(n_clas or rng.integers(2, 6))
    a = rng.normal(size=(p, 2 * p))
    cov = a @ a.T / (2 * p) + 0.1 * np.eye(p)
    delta = rng.normal(size=(k - 1, p))
    return cov, delta
