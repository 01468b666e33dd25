"""Class-conditional statistics and label impurity measures.

Labels are integer class ids in ``1..n_clas``. Covariances use two-pass
accumulation (means first, then centred scatter).
"""
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyClass, EmptySet, InsufficientSamples


@dataclass
class LabeledSampleSet:
    """Feature matrix with 1-based class labels.

    ``weights`` is carried for completeness; every statistic in this module
    is computed unweighted.
    """

    features: np.ndarray
    labels: np.ndarray
    n_clas: int
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError("need at least one sample and one feature")
        if self.labels.min() < 1 or self.labels.max() > self.n_clas:
            raise ValueError(f"labels must lie in 1..{self.n_clas}")
        if self.weights is None:
            self.weights = np.ones(self.labels.shape[0])
        else:
            self.weights = np.asarray(self.weights, dtype=float)
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ValueError("weights must be finite and nonnegative")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_dims(self):
        return self.features.shape[1]

    def counts(self):
        return np.bincount(self.labels, minlength=self.n_clas + 1)[1:]


@dataclass
class ClassStats:
    class_means: np.ndarray
    priors: np.ndarray
    overall_mean: np.ndarray
    within_cov: np.ndarray
    between_cov: np.ndarray
    dof: int


def class_means_priors(data: LabeledSampleSet):
    """Per-class means, class priors and the prior-weighted overall mean."""
    counts = data.counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyClass(int(empty[0]) + 1)
    means = np.empty((data.n_clas, data.n_dims))
    for c in range(data.n_clas):
        means[c] = data.features[data.labels == c + 1].mean(axis=0)
    priors = counts / counts.sum()
    overall = priors @ means
    return means, priors, overall


def within_class_covariance(data: LabeledSampleSet, class_means):
    """Pooled within-class covariance with ``N - n_clas`` degrees of freedom."""
    dof = data.n_samples - data.n_clas
    if dof < 1:
        raise InsufficientSamples(
            f"{data.n_samples} samples cannot support {data.n_clas} classes")
    centred = data.features - np.asarray(class_means)[data.labels - 1]
    scatter = centred.T @ centred
    cov = scatter / dof
    return 0.5 * (cov + cov.T), dof


def between_class_covariance(class_means, priors, overall_mean):
    dev = np.asarray(class_means) - np.asarray(overall_mean)
    cov = (dev * np.asarray(priors)[:, None]).T @ dev
    return 0.5 * (cov + cov.T)


def class_covariance(data: LabeledSampleSet, class_id):
    """Maximum-likelihood (1/n_c normalised) covariance of one class."""
    rows = data.features[data.labels == class_id]
    if rows.shape[0] == 0:
        raise EmptyClass(class_id)
    centred = rows - rows.mean(axis=0)
    cov = centred.T @ centred / rows.shape[0]
    return 0.5 * (cov + cov.T)


def class_stats(data: LabeledSampleSet) -> ClassStats:
    means, priors, overall = class_means_priors(data)
    within, dof = within_class_covariance(data, means)
    between = between_class_covariance(means, priors, overall)
    return ClassStats(means, priors, overall, within, between, dof)


def _label_counts(labels, class_universe):
    labels = list(labels)
    universe = list(class_universe)
    index = {c: i for i, c in enumerate(universe)}
    counts = [0] * len(universe)
    for lab in labels:
        counts[index[lab]] += 1
    return counts


def _gini_from_counts_exact(counts):
    total = sum(counts)
    return Fraction(total * total - sum(n * n for n in counts), total * total)


def gini_impurity(labels: Sequence[int], class_universe: Sequence[int]) -> float:
    """``1 - sum_c p_c**2`` computed from exact integer counts."""
    counts = _label_counts(labels, class_universe)
    if sum(counts) == 0:
        raise EmptySet("gini impurity of an empty label set")
    return float(_gini_from_counts_exact(counts))


def entropy(labels: Sequence[int], class_universe: Sequence[int]) -> float:
    """Shannon entropy in bits, with ``0 log 0 = 0``."""
    counts = _label_counts(labels, class_universe)
    total = sum(counts)
    if total == 0:
        raise EmptySet("entropy of an empty label set")
    h = 0.0
    for n in counts:
        if n:
            p = n / total
            h -= p * np.log2(p)
    return float(h)


def gini_of_partition(subsets, class_universe=None) -> float:
    """Size-weighted mean Gini impurity of disjoint label subsets.

    Empty subsets contribute nothing. Evaluated in exact rational
    arithmetic and rounded once.
    """
    subsets = [list(s) for s in subsets]
    if class_universe is None:
        class_universe = sorted({lab for s in subsets for lab in s})
    total = sum(len(s) for s in subsets)
    if total == 0:
        raise EmptySet("every subset of the partition is empty")
    acc = Fraction(0)
    for s in subsets:
        if s:
            acc += Fraction(len(s), total) * _gini_from_counts_exact(
                _label_counts(s, class_universe))
    return float(acc)


def partition_gini_from_counts(counts) -> np.ndarray:
    """Vectorised weighted Gini from count tensors.

    ``counts[..., k, c]`` holds the number of samples of true class ``c``
    assigned to subset ``k``; the result drops the last two axes.
    """
    counts = np.asarray(counts, dtype=np.float64)
    sizes = counts.sum(axis=-1)
    total = sizes.sum(axis=-1)
    sq = (counts * counts).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        per = np.where(sizes > 0, sizes - sq / np.where(sizes > 0, sizes, 1), 0.0)
    return per.sum(axis=-1) / total
