"""Per-node discriminant: projecting coefficients, scores, threshold search, QDA.

Partition geometry for the ``K - 1`` thresholds: a sample goes to
``argmax_c (d_c - tau_c)`` where ``d_c`` is its class score relative to the
reference class (``d_1 = 0``, ``tau_1 = 0``). Ties go to the smallest
class index. With two classes this is the usual single cut on ``d_2``.
"""
import itertools
import warnings
from dataclasses import dataclass, field
from typing import List

import numba
import numpy as np
from scipy import linalg

from .core_stats import (ClassStats, LabeledSampleSet, between_class_covariance,
                         class_means_priors, partition_gini_from_counts,
                         within_class_covariance)
from .errors import (DegenerateScoresWarning, DimensionMismatch,
                     InsufficientSamples, SingularCovariance)
from .msda import DiscriminantDirections, MsdaProblem, solve_msda

N_GRID = 32
CARTESIAN_MAX_DIMS = 3


@dataclass
class NodeDiscriminant:
    """Fitted linear discriminant over the classes present at a node.

    Rows of ``theta``, ``betas`` and ``class_means`` follow ``classes``
    (sorted 1-based labels); the first one is the reference class.
    """

    classes: List[int]
    theta: np.ndarray
    betas: np.ndarray
    class_means: np.ndarray
    log_priors: np.ndarray
    thresholds: np.ndarray
    selected_indices: List[int] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def n_feat(self):
        return self.theta.shape[1]

    def margins(self, features):
        """Reference-relative scores ``d_c`` (column 0 is zero)."""
        f = np.atleast_2d(np.asarray(features, dtype=float))
        if f.shape[1] != self.n_feat:
            raise DimensionMismatch(f"expected {self.n_feat} features, got {f.shape[1]}")
        return reference_margins(f, self.theta, self.class_means, self.log_priors)

    def classify_index(self, features):
        return assign_with_offsets(self.margins(features), self.thresholds)

    def classify(self, features):
        return np.asarray(self.classes)[self.classify_index(features)]


def reference_margins(features, theta, class_means, log_priors):
    """``log(pi_c/pi_1) + theta_c' (f - (mu_1 + mu_c)/2)`` for every class.

    Only features with a nonzero direction contribute, so the caller may pass
    zeros for unselected columns.
    """
    f = np.atleast_2d(features)
    mid = 0.5 * (class_means[0][None, :] + class_means)
    offset = np.einsum("ch,ch->c", theta, mid)
    out = f @ theta.T - offset + (log_priors - log_priors[0])
    out[:, 0] = 0.0
    return out


def betas_from_directions(theta: DiscriminantDirections, stats: ClassStats,
                          lam_jitter=None):
    """``beta_1 = S^-1 mu_1`` by a Cholesky solve, then ``beta_c = theta_c + beta_1``."""
    cov = stats.within_cov
    p = cov.shape[0]
    mu1 = stats.class_means[0]
    scale = max(np.trace(cov) / p, 1e-300)
    if lam_jitter is not None:
        jitters = [lam_jitter]
    else:
        jitters = [0.0] + [scale * 10.0 ** e for e in range(-10, -1)]
    for j in jitters:
        try:
            factor = linalg.cho_factor(cov + j * np.eye(p), check_finite=True)
            beta1 = linalg.cho_solve(factor, mu1)
        except (linalg.LinAlgError, ValueError):
            continue
        if np.all(np.isfinite(beta1)):
            break
    else:
        raise SingularCovariance("regularised covariance is still not positive definite")
    return np.asarray(theta.theta) + beta1[None, :]


def lda_scores(features, disc: NodeDiscriminant):
    """``log pi_c + beta_c' (f - mu_c / 2)`` per class."""
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != disc.betas.shape[1]:
        raise DimensionMismatch(f"expected {disc.betas.shape[1]} features, got {f.shape[-1]}")
    half = 0.5 * np.einsum("ch,ch->c", disc.betas, disc.class_means)
    return disc.log_priors + f @ disc.betas.T - half


def project(features, betas):
    f = np.asarray(features, dtype=float)
    betas = np.atleast_2d(betas)
    if f.shape[-1] != betas.shape[1]:
        raise DimensionMismatch(f"expected {betas.shape[1]} features, got {f.shape[-1]}")
    return f @ betas.T


def assign_with_offsets(scores, offsets):
    """Column index of ``argmax_c(score_c - offset_c)`` with ``offset_0 = 0``."""
    s = np.atleast_2d(scores)
    if s.shape[1] == 1:
        return np.zeros(s.shape[0], dtype=np.int64)
    shifted = s - np.concatenate([[0.0], np.asarray(offsets, dtype=float)])[None, :]
    return np.argmax(shifted, axis=1)


def _label_index(labels):
    universe, idx = np.unique(np.asarray(labels), return_inverse=True)
    return universe, idx


def partition_counts(assigned, label_idx, n_subsets, n_labels):
    flat = np.bincount(assigned * n_labels + label_idx, minlength=n_subsets * n_labels)
    return flat.reshape(n_subsets, n_labels)


def threshold_grids(projections, n_grid=N_GRID):
    """Candidate offsets for classes 2..K.

    Two classes: every midpoint between sorted distinct margins plus both
    outer cuts, so the 1-D sweep is exhaustive. More classes: ``n_grid``
    equally spaced quantiles of each margin. Zero is always included.
    """
    s = np.atleast_2d(np.asarray(projections, dtype=float))
    k = s.shape[1]
    margins = s[:, 1:] - s[:, :1]
    grids = []
    for c in range(k - 1):
        m = margins[:, c]
        if k == 2:
            u = np.unique(m)
            cand = np.concatenate([[u[0] - 1.0], 0.5 * (u[1:] + u[:-1]), [u[-1]], [0.0]])
        else:
            levels = (np.arange(n_grid) + 0.5) / n_grid
            cand = np.concatenate([np.quantile(m, levels), [0.0]])
        grids.append(np.unique(cand))
    return grids


@numba.njit(cache=True, nogil=True)
def _sweep_last_kernel(margins, label_idx, n_labels, fixed_combos, grid):
    """Weighted Gini for every (fixed offsets, last offset) pair.

    A sample moves to the last class when ``tau_last < d_last - best_other``;
    per-grid counts come from a cumulative histogram over the cut position.
    """
    n, n_dir = margins.shape
    k = n_dir + 1
    n_combo = fixed_combos.shape[0]
    g = grid.shape[0]
    out = np.empty((n_combo, g))
    hist = np.zeros((g + 1, k, n_labels))
    low = np.zeros((k, n_labels))
    high = np.zeros(n_labels)
    for ci in range(n_combo):
        hist[:] = 0.0
        for i in range(n):
            best = 0.0
            other = 0
            for c in range(n_dir - 1):
                v = margins[i, c] - fixed_combos[ci, c]
                if v > best:
                    best = v
                    other = c + 1
            cut = margins[i, n_dir - 1] - best
            lo = 0
            hi = g
            while lo < hi:
                mid = (lo + hi) // 2
                if grid[mid] < cut:
                    lo = mid + 1
                else:
                    hi = mid
            hist[lo, other, label_idx[i]] += 1.0
        low[:] = 0.0
        high[:] = 0.0
        for p in range(g + 1):
            for a in range(k):
                for l in range(n_labels):
                    high[l] += hist[p, a, l]
        for p in range(g):
            for a in range(k):
                for l in range(n_labels):
                    low[a, l] += hist[p, a, l]
                    high[l] -= hist[p, a, l]
            acc = 0.0
            for a in range(k):
                size = 0.0
                sq = 0.0
                for l in range(n_labels):
                    v = high[l] if a == k - 1 else low[a, l]
                    size += v
                    sq += v * v
                if size > 0:
                    acc += size - sq / size
            out[ci, p] = acc / n
    return out


def _sweep_last(margins, label_idx, n_labels, fixed, grid):
    fixed = np.asarray(fixed, dtype=np.float64).reshape(1, -1)
    return _sweep_last_kernel(np.ascontiguousarray(margins, dtype=np.float64),
                              label_idx.astype(np.int64), int(n_labels), fixed,
                              np.ascontiguousarray(grid, dtype=np.float64))[0]


def optimize_thresholds(projections, labels, n_grid=N_GRID, return_counts=False,
                        warn=True):
    """Grid search for the offsets minimising the weighted partition Gini.

    Up to three offsets are searched on the full Cartesian grid; beyond that
    coordinate sweeps run until no offset improves. Among equal impurities
    the offsets closest to zero win.
    """
    s = np.atleast_2d(np.asarray(projections, dtype=float))
    k = s.shape[1]
    universe, label_idx = _label_index(labels)
    n_labels = universe.shape[0]
    if s.shape[0] != label_idx.shape[0]:
        raise DimensionMismatch("projections and labels disagree on sample count")
    if k < 2:
        counts = partition_counts(np.zeros_like(label_idx), label_idx, 1, n_labels)
        g = float(partition_gini_from_counts(counts))
        return (np.zeros(0), g, counts) if return_counts else (np.zeros(0), g)
    margins = s[:, 1:] - s[:, :1]
    if _all_identical(margins):
        if warn:
            warnings.warn("all projections identical; using zero thresholds",
                          DegenerateScoresWarning, stacklevel=2)
        tau = np.zeros(k - 1)
    else:
        grids = threshold_grids(s, n_grid)
        if k - 1 <= CARTESIAN_MAX_DIMS:
            tau = _cartesian_search(margins, label_idx, n_labels, grids)
        else:
            tau = _coordinate_search(margins, label_idx, n_labels, grids)
    assigned = assign_with_offsets(s, tau)
    counts = partition_counts(assigned, label_idx, k, n_labels)
    g = float(partition_gini_from_counts(counts))
    return (tau, g, counts) if return_counts else (tau, g)


def _all_identical(margins):
    return bool(np.all(margins == margins[:1]))


def _cartesian_search(margins, label_idx, n_labels, grids):
    last_grid = grids[-1]
    product = list(itertools.product(*grids[:-1]))
    combos = np.array(product, dtype=np.float64).reshape(len(product), len(grids) - 1)
    ginis = _sweep_last_kernel(np.ascontiguousarray(margins), label_idx.astype(np.int64),
                               int(n_labels), combos, np.ascontiguousarray(last_grid))
    norms = (combos ** 2).sum(axis=1)[:, None] + (last_grid ** 2)[None, :]
    lo = ginis.min()
    ties = np.argwhere(ginis <= lo + 1e-12)
    ci, gi = ties[np.argmin(norms[ties[:, 0], ties[:, 1]])]
    return np.concatenate([combos[ci], [last_grid[gi]]])


def _coordinate_search(margins, label_idx, n_labels, grids, max_rounds=50):
    n_dir = margins.shape[1]
    tau = np.zeros(n_dir)
    scores = np.hstack([np.zeros((margins.shape[0], 1)), margins])

    def evaluate(t):
        counts = partition_counts(assign_with_offsets(scores, t), label_idx,
                                  n_dir + 1, n_labels)
        return float(partition_gini_from_counts(counts))

    current = evaluate(tau)
    for _ in range(max_rounds):
        improved = False
        for c in range(n_dir):
            order = [j for j in range(n_dir) if j != c] + [c]
            sub = margins[:, order]
            ginis = _sweep_last(sub, label_idx, n_labels, tau[order[:-1]], grids[c])
            for j in np.argsort(ginis, kind="stable")[:3]:
                trial = tau.copy()
                trial[c] = grids[c][j]
                g = evaluate(trial)
                if g < current - 1e-12:
                    tau, current, improved = trial, g, True
                    break
        if not improved:
            break
    return tau


def fit_discriminant(features, labels, lam, n_grid=N_GRID, tol=1e-7, max_iters=1000):
    """Fit MSDA directions and thresholds on already normalised features.

    Returns ``(disc, gini, counts)`` where ``counts[k, l]`` tallies samples of
    the ``l``-th present label assigned to subset ``k``.
    """
    f = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    classes = [int(c) for c in np.unique(labels)]
    k = len(classes)
    if k == 1:
        p = f.shape[1]
        disc = NodeDiscriminant(classes, np.zeros((1, p)), np.zeros((1, p)),
                                f.mean(axis=0, keepdims=True), np.zeros(1), np.zeros(0))
        counts = np.array([[labels.shape[0]]])
        return disc, 0.0, counts
    local = np.searchsorted(classes, labels) + 1
    data = LabeledSampleSet(f, local, k)
    stats, flags = _stats_with_fallback(data)
    delta = stats.class_means[1:] - stats.class_means[0]
    # Status goes into flags rather than warnings, which are not thread safe to capture.
    dirs = solve_msda(MsdaProblem(stats.within_cov, delta, lam, max_iters=max_iters, tol=tol),
                      warn=False)
    if not dirs.converged:
        flags.append("not_converged")
    betas = betas_from_directions(dirs, stats)
    log_priors = np.log(stats.priors)
    margins = reference_margins(f, dirs.theta, stats.class_means, log_priors)
    tau, g, counts = optimize_thresholds(margins, labels, n_grid, return_counts=True,
                                         warn=False)
    if _all_identical(margins[:, 1:]):
        flags.append("degenerate_scores")
    disc = NodeDiscriminant(classes, dirs.theta, betas, stats.class_means,
                            log_priors, tau, list(dirs.active_features), flags)
    return disc, g, counts


def _stats_with_fallback(data):
    """Class statistics, swapping in an identity covariance when the pooled one is unusable."""
    means, priors, overall = class_means_priors(data)
    between = between_class_covariance(means, priors, overall)
    flags = []
    try:
        within, dof = within_class_covariance(data, means)
        if not np.trace(within) > 0:
            within = np.eye(data.n_dims)
            flags.append("identity_covariance")
    except InsufficientSamples:
        within, dof = np.eye(data.n_dims), 0
        flags.append("identity_covariance")
    return ClassStats(means, priors, overall, within, between, dof), flags


def qda_classify(features, means, covariances, priors, classes=None):
    """Quadratic discriminant label (1-based unless ``classes`` is given)."""
    f = np.asarray(features, dtype=float)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    scores = np.empty((f.shape[0], len(means)))
    for c, (mu, cov, pi) in enumerate(zip(means, covariances, priors)):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        p = cov.shape[0]
        scale = max(np.trace(cov) / p, 1e-12)
        for j in [0.0] + [scale * 10.0 ** e for e in range(-10, -1)]:
            try:
                factor = linalg.cho_factor(cov + j * np.eye(p))
                break
            except linalg.LinAlgError:
                continue
        else:
            raise SingularCovariance(f"class {c + 1} covariance is singular")
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        d = f - np.asarray(mu)[None, :]
        maha = np.einsum("ij,ji->i", d, linalg.cho_solve(factor, d.T))
        scores[:, c] = np.log(pi) - 0.5 * logdet - 0.5 * maha
    idx = np.argmax(scores, axis=1)
    out = (np.asarray(classes)[idx] if classes is not None else idx + 1)
    return out[0] if single else out
