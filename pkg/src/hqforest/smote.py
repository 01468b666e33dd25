"""Per-node multiclass balancing by convex interpolation between same-class neighbours.

Every minority class is raised to the majority count. Each synthetic sample
is ``m * f_sample + (1 - m) * f_neighbour`` with the tree-specific weight
``m = w / (n_weak + 1)``, where the neighbour is one of the sample's nearest
realistic same-class samples (Euclidean, exact search).
"""
import warnings
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateDataWarning, SingleClass


@dataclass
class BalancePlan:
    """Per-class targets. ``rates`` are percentages ``100 * n_major / n_c``;
    ``n_neigh`` is the neighbour pool size ``round(rate / 100)`` for
    oversampled classes; ``per_sample`` is the mean number of synthetic
    samples generated per realistic one."""

    majority: int
    counts: Dict[int, int]
    rates: Dict[int, float]
    n_neigh: Dict[int, int]
    per_sample: Dict[int, float]

    @property
    def target(self):
        return self.counts[self.majority]


@dataclass
class BalancedSet:
    features: np.ndarray
    labels: np.ndarray
    heterogeneity: np.ndarray
    synthetic: np.ndarray
    parents: np.ndarray
    weight: float
    duplicated: List[int] = field(default_factory=list)


def plan_balancing(labels) -> BalancePlan:
    labels = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise SingleClass("balancing needs at least two classes")
    # Ties for the majority go to the smallest class id.
    major = int(classes[np.argmax(counts)])
    n_major = int(counts.max())
    cnt = {int(c): int(n) for c, n in zip(classes, counts)}
    rates = {c: 100.0 * n_major / n for c, n in cnt.items()}
    neigh = {c: max(1, int(round(rates[c] / 100.0))) for c, n in cnt.items() if n < n_major}
    per_sample = {c: (n_major - n) / n for c, n in cnt.items()}
    return BalancePlan(major, cnt, rates, neigh, per_sample)


def interpolation_weight(w, n_weak):
    if not 1 <= w <= n_weak:
        raise ValueError(f"tree index {w} outside 1..{n_weak}")
    return w / (n_weak + 1)


def _interpolate(base, other, m):
    # other + m * (base - other) stays inside [min, max] of the parents under rounding.
    return other + m * (base - other)


def smote_balance(features, labels, heterogeneity, plan: BalancePlan, w, n_weak,
                  rng, warn=True) -> BalancedSet:
    """Append synthetic minority samples until every class reaches the majority count.

    Realistic samples come first, in their original order. Each realistic
    sample of class ``c`` seeds ``floor(need / n_c)`` synthetic samples, and a
    uniformly drawn subset seeds one more. Its ``t``-th synthetic sample pairs
    it with its ``t``-th nearest neighbour (cycling through ``n_neigh``).
    Single-sample classes are duplicated instead and reported in
    ``duplicated`` (with a :class:`DegenerateDataWarning` if ``warn``).
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    het = np.asarray(heterogeneity, dtype=np.float64)
    m = interpolation_weight(w, n_weak)
    target = plan.target
    new_f, new_l, new_h, parents, duplicated = [], [], [], [], []
    for c in sorted(plan.counts):
        idx = np.flatnonzero(labels == c)
        n_c = idx.size
        need = target - n_c
        if need <= 0:
            continue
        rounds, extra = divmod(need, n_c)
        uses = np.full(n_c, rounds, dtype=np.int64)
        if extra:
            uses[np.sort(rng.choice(n_c, size=extra, replace=False))] += 1
        base_local = np.repeat(np.arange(n_c), uses)
        turn = np.arange(need) - np.repeat(np.cumsum(uses) - uses, uses)
        if n_c == 1:
            duplicated.append(c)
            nb_local = np.zeros(need, dtype=np.int64)
            base_g = idx[base_local]
            new_f.append(f[base_g])
            new_h.append(het[base_g])
        else:
            k = min(plan.n_neigh.get(c, 1), n_c - 1)
            tree = cKDTree(f[idx])
            _, nn = tree.query(f[idx], k=k + 1)
            nn = np.asarray(nn).reshape(n_c, k + 1)
            # Drop self-matches; duplicates of a point may come back in either order.
            not_self = nn != np.arange(n_c)[:, None]
            order = np.argsort(~not_self, axis=1, kind="stable")[:, :k]
            nb = np.take_along_axis(nn, order, axis=1)
            nb_local = nb[base_local, turn % k]
            base_g, nb_g = idx[base_local], idx[nb_local]
            new_f.append(_interpolate(f[base_g], f[nb_g], m))
            new_h.append(_interpolate(het[base_g], het[nb_g], m))
        new_l.append(np.full(need, c, dtype=np.int64))
        parents.append(np.stack([idx[base_local], idx[nb_local]], axis=1))
    if duplicated and warn:
        warnings.warn(f"classes {duplicated} have a single sample; duplicated instead of "
                      "interpolated", DegenerateDataWarning, stacklevel=2)
    n = labels.size
    if new_l:
        f_out = np.vstack([f] + new_f)
        l_out = np.concatenate([labels] + new_l)
        h_out = np.concatenate([het] + new_h)
        par = np.vstack([np.full((n, 2), -1, dtype=np.int64)] + parents)
    else:
        f_out, l_out, h_out = f.copy(), labels.copy(), het.copy()
        par = np.full((n, 2), -1, dtype=np.int64)
    synth = np.zeros(l_out.size, dtype=bool)
    synth[n:] = True
    return BalancedSet(f_out, l_out, h_out, synth, par, m, duplicated)
