"""Group-Lasso multiclass sparse discriminant analysis.

Solves, for directions ``theta_c`` (c = 2..K) relative to reference class 1,

    sum_c [ 1/2 theta_c' S theta_c - delta_c' theta_c ]
        + lam * sum_h || theta_(2:K),h ||_2

by cyclic blockwise coordinate descent. Each block is one feature ``h``
across all K-1 directions; its update is a closed-form group
soft-threshold of the partial-residual target. Only column ``h`` of ``S``
is read per block step.
"""
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numba
import numpy as np

from .errors import DimensionMismatch, NotConvergedWarning, ZeroDiagonal

JITTER_TRIGGER = 1e-12
JITTER_SCALE = 1e-10


@dataclass
class MsdaProblem:
    within_cov: np.ndarray
    delta: np.ndarray
    lam: float
    max_iters: int = 1000
    tol: float = 1e-7

    def __post_init__(self):
        cov = np.array(self.within_cov, dtype=np.float64)
        delta = np.atleast_2d(np.array(self.delta, dtype=np.float64))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise DimensionMismatch("covariance must be square")
        if delta.shape[1] != cov.shape[0]:
            raise DimensionMismatch(
                f"delta has {delta.shape[1]} features, covariance {cov.shape[0]}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("max_iters must be >= 1 and tol > 0")
        cov = 0.5 * (cov + cov.T)
        diag = np.diag(cov)
        if np.any(diag < JITTER_TRIGGER):
            bump = JITTER_SCALE * np.trace(cov) / cov.shape[0]
            cov[np.diag_indices_from(cov)] += bump
        self.within_cov = cov
        self.delta = delta

    @property
    def n_feat(self):
        return self.within_cov.shape[0]


@dataclass
class DiscriminantDirections:
    """Directions for all K classes; row 0 (class 1) is identically zero."""

    theta: np.ndarray
    active_features: List[int]
    iterations_used: int
    converged: bool
    objective_trace: Optional[List[float]] = field(default=None, repr=False)


def group_soft_threshold(tilde, lam):
    """Scale ``tilde`` by ``max(0, 1 - lam / ||tilde||_2)``."""
    tilde = np.asarray(tilde, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return tilde.copy()
    norm = np.sqrt(np.dot(tilde, tilde))
    if norm == 0.0:
        return np.zeros_like(tilde)
    return tilde * max(0.0, 1.0 - lam / norm)


def tilde_theta(problem: MsdaProblem, theta_current, h):
    """Partial-residual coordinate target for feature group ``h``.

    ``theta_current`` holds the K-1 non-reference directions as rows.
    """
    cov = problem.within_cov
    s_hh = cov[h, h]
    if not s_hh > 0:
        raise ZeroDiagonal(h)
    theta = np.asarray(theta_current, dtype=np.float64)
    col = cov[:, h]
    cross = theta @ col - theta[:, h] * s_hh
    return (problem.delta[:, h] - cross) / s_hh


def msda_objective(problem: MsdaProblem, theta) -> float:
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if theta.shape[0] == problem.delta.shape[0] + 1:
        theta = theta[1:]
    cov = problem.within_cov
    quad = 0.5 * np.einsum("ch,hk,ck->", theta, cov, theta)
    lin = np.sum(problem.delta * theta)
    pen = problem.lam * np.sum(np.sqrt(np.sum(theta * theta, axis=0)))
    return float(quad - lin + pen)


@numba.njit(cache=True, nogil=True)
def _sweep(cov, delta, theta, resid, lam):
    """One ascending pass over all feature groups.

    ``resid[:, k]`` caches ``sum_h' theta[:, h'] * cov[h', k]`` and is kept
    current with a rank-one update from column ``h`` only.
    """
    n_dir, n_feat = theta.shape
    max_change = 0.0
    tilde = np.empty(n_dir)
    new = np.empty(n_dir)
    for h in range(n_feat):
        s_hh = cov[h, h]
        norm2 = 0.0
        # Threshold the unscaled target s_hh * tilde against lam, so the
        # inactive-group test involves no division.
        for c in range(n_dir):
            t = delta[c, h] - resid[c, h] + theta[c, h] * s_hh
            tilde[c] = t
            norm2 += t * t
        norm = np.sqrt(norm2)
        if norm <= lam:
            scale = 0.0
        else:
            scale = (1.0 - lam / norm) / s_hh
        moved = False
        for c in range(n_dir):
            new[c] = tilde[c] * scale
            d = new[c] - theta[c, h]
            if d != 0.0:
                moved = True
                if abs(d) > max_change:
                    max_change = abs(d)
        if moved:
            for c in range(n_dir):
                d = new[c] - theta[c, h]
                if d != 0.0:
                    for k in range(n_feat):
                        resid[c, k] += d * cov[h, k]
                theta[c, h] = new[c]
    return max_change


def solve_msda(problem: MsdaProblem, record_objective=False,
               warn=True) -> DiscriminantDirections:
    """Cyclic group coordinate descent from a zero start.

    Stops once the largest coordinate change of a sweep drops below
    ``problem.tol``; otherwise returns the last iterate after ``max_iters``
    sweeps with ``converged=False`` and, if ``warn``, a
    :class:`NotConvergedWarning`.
    """
    cov = problem.within_cov
    diag = np.diag(cov)
    bad = np.flatnonzero(~(diag > 0))
    if bad.size:
        raise ZeroDiagonal(int(bad[0]))
    delta = np.ascontiguousarray(problem.delta)
    n_dir, n_feat = delta.shape
    theta = np.zeros((n_dir, n_feat))
    resid = np.zeros((n_dir, n_feat))
    trace = [msda_objective(problem, theta)] if record_objective else None
    converged = False
    it = 0
    for it in range(1, problem.max_iters + 1):
        change = _sweep(cov, delta, theta, resid, float(problem.lam))
        if record_objective:
            trace.append(msda_objective(problem, theta))
        if change < problem.tol:
            converged = True
            break
    if not converged and warn:
        warnings.warn(
            f"MSDA stopped after {problem.max_iters} sweeps without converging",
            NotConvergedWarning, stacklevel=2)
    full = np.vstack([np.zeros((1, n_feat)), theta])
    active = [int(h) for h in np.flatnonzero(np.any(theta != 0.0, axis=0))]
    return DiscriminantDirections(full, active, it, converged, trace)


def kkt_violation(problem: MsdaProblem, theta) -> float:
    """Largest violation of the group-Lasso optimality conditions.

    Active groups: ``|| grad_h + lam * theta_h / ||theta_h|| ||``.
    Inactive groups: ``max(0, ||grad_h|| - lam)``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if theta.shape[0] == problem.delta.shape[0] + 1:
        theta = theta[1:]
    grad = theta @ problem.within_cov - problem.delta
    worst = 0.0
    for h in range(theta.shape[1]):
        g = grad[:, h]
        t = theta[:, h]
        tn = np.linalg.norm(t)
        if tn > 0:
            v = np.linalg.norm(g + problem.lam * t / tn)
        else:
            v = max(0.0, np.linalg.norm(g) - problem.lam)
        worst = max(worst, v)
    return float(worst)


def lasso_transform(beta, lam):
    """Elementwise soft threshold ``sign(b) * max(|b| - lam, 0)``."""
    beta = np.asarray(beta, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return np.sign(beta) * np.maximum(np.abs(beta) - lam, 0.0)


def ridge_transform(beta, variances, lam):
    """Shrink each coefficient by ``sigma / (sigma + lam)``."""
    beta = np.asarray(beta, dtype=np.float64)
    sigma = np.asarray(variances, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("variances must be nonnegative")
    if lam == 0:
        return beta.copy()
    return beta * (sigma / (sigma + lam))
