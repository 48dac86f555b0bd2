"""Leverage scores, lp Lewis weights and row sampling that preserves a mixed
quadratic + p-norm energy up to constant factors."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, UnsupportedError

RANK_RTOL = 1e-10


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def leverage_scores(A, tol=RANK_RTOL):
    """``a_i^T (A^T A)^+ a_i`` for every row, from a thin SVD."""
    A = _dense(A)
    if A.size == 0:
        return np.zeros(A.shape[0])
    U, sv, _ = np.linalg.svd(A, full_matrices=False)
    top = sv.max(initial=0.0)
    if top == 0:
        return np.zeros(A.shape[0])
    keep = sv > tol * top
    gap = sv[keep].min() / top
    if gap < 1e3 * tol and keep.sum() < len(sv) and sv[~keep].max() > 1e-3 * tol * top:
        warnings.warn(f"numerical rank is ambiguous; using rank {int(keep.sum())}")
    return np.sum(U[:, keep] ** 2, axis=1)


@dataclass
class LewisResult:
    tau: np.ndarray
    p: float
    iterations: int
    fixed_point_residual: float
    converged: bool


def default_lewis_iterations(p, tol):
    return int(2 * math.ceil(math.log(1 / tol)) / (1 - abs(p / 2 - 1))) + 1


def lewis_identity_residual(A, tau, p):
    """Largest relative violation of ``a_i^T (A^T diag(tau)^(1-2/p) A)^+ a_i = tau_i^(2/p)``."""
    A = _dense(A)
    tau = np.asarray(tau, dtype=float)
    live = np.linalg.norm(A, axis=1) > 0
    q = _weighted_quadratic(A[live], tau[live], p)
    target = tau[live] ** (2 / p)
    return float(np.max(np.abs(q - target) / target, initial=0.0))


def _weighted_quadratic(A, w, p):
    # a_i^T (A^T W^(1-2/p) A)^+ a_i = leverage_i(W^(1/2-1/p) A) / w_i^(1-2/p)
    scale = w ** (0.5 - 1 / p)
    return leverage_scores(A * scale[:, None]) / scale ** 2


def lewis_weights(A, p, max_iter=None, tol=1e-6):
    """lp Lewis weights by the fixed-point iteration ``w <- (a_i^T (A^T W^(1-2/p) A)^+ a_i)^(p/2)``."""
    if not 2 <= p < 4:
        raise UnsupportedError("Lewis weights are computed only for 2 <= p < 4")
    A = _dense(A)
    m = A.shape[0]
    tau = np.zeros(m)
    live = np.linalg.norm(A, axis=1) > 0
    rows = A[live]
    if max_iter is None:
        max_iter = default_lewis_iterations(p, tol)
    w = leverage_scores(rows)
    if p == 2:
        tau[live] = w
        return LewisResult(tau, p, 0, 0.0, True)
    w = np.maximum(w, 1e-300)
    resid = np.inf
    it = 0
    # aim below tol so that the weight sum also lands within tol of the rank
    target = tol / (10 * max(rows.shape[1], 1))
    for it in range(1, max_iter + 1):
        q = _weighted_quadratic(rows, w, p)
        resid = float(np.max(np.abs(q - w ** (2 / p)) / w ** (2 / p), initial=0.0))
        if resid <= target:
            it -= 1
            break
        w = np.maximum(q, 1e-300) ** (p / 2)
    else:
        q = _weighted_quadratic(rows, w, p)
        resid = float(np.max(np.abs(q - w ** (2 / p)) / w ** (2 / p), initial=0.0))
    tau[live] = w
    return LewisResult(tau, p, it, resid, resid <= tol)


def sampling_log(n):
    return max(math.log(n), 1.0)


def mixed_sampling_values(tauC, tauD, n, p, C_const=8.0):
    """``C max(tauC_i log n, tauD_i n^(p/2-1) log n)`` entrywise."""
    tauC = np.asarray(tauC, dtype=float)
    tauD = np.asarray(tauD, dtype=float)
    if tauC.shape != tauD.shape:
        raise InvalidInputError("score vectors must have equal length")
    lg = sampling_log(n)
    return C_const * np.maximum(tauC * lg, tauD * n ** (p / 2 - 1) * lg)


@dataclass
class SampledRows:
    """Drawn row indices with the per-draw rescaling factors.

    Each draw ``b`` contributes the row ``D_b * p_scale`` to the p-norm matrix
    and ``C_b * p_scale * r_scale`` (that is ``C_b / (N prob_b)^(1/2)``) to the
    quadratic one.
    """

    draws: np.ndarray
    nu: np.ndarray
    p_scale: np.ndarray
    r_scale: np.ndarray
    p: float

    @property
    def count(self):
        return len(self.draws)


def draw_rows(nu, p, rng):
    nu = np.asarray(nu, dtype=float)
    if np.any(nu < 0) or not np.all(np.isfinite(nu)):
        raise InvalidInputError("sampling values must be finite and non-negative")
    total = nu.sum()
    if total < 1:
        raise InvalidInputError("sampling values must sum to at least 1")
    count = int(math.ceil(total - 1e-9))
    prob = nu / total
    draws = rng.choice(len(nu), size=count, p=prob)
    mult = count * prob[draws]
    p_scale = mult ** (-1 / p)
    r_scale = mult ** (1 / p - 0.5)
    return SampledRows(draws, nu, p_scale, r_scale, p)


def apply_sample(sample, C, D):
    """Merged sampled matrices; repeated draws of a row are combined into one row."""
    C = _dense(C)
    D = _dense(D)
    idx, counts = np.unique(sample.draws, return_counts=True)
    total = sample.nu.sum()
    mult = len(sample.draws) * sample.nu[idx] / total
    C_s = C[idx] * np.sqrt(counts / mult)[:, None]
    D_s = D[idx] * ((counts / mult) ** (1 / sample.p))[:, None]
    return C_s, D_s


def sample_rows(C, D, nu, p, rng):
    """Sample rows of the aligned pair ``(C, D)``; returns ``(C_s, D_s, SampledRows)``."""
    sample = draw_rows(nu, p, rng)
    C_s, D_s = apply_sample(sample, C, D)
    return C_s, D_s, sample


def _pad_rows(A, rows):
    A = _dense(A)
    if A.shape[0] == rows:
        return A
    return np.vstack([A, np.zeros((rows - A.shape[0], A.shape[1]))])


def sparsify_mixed_problem(M, N, p, rng, C_const=8.0, tol=1e-6):
    """Row-sample ``M`` (quadratic role) and ``N`` (p-norm role) jointly.

    Rows are paired by index; the shorter matrix is padded with zero rows.
    Returns ``(M_s, N_s, info)``.
    """
    if not 2 <= p < 4:
        raise UnsupportedError("Lewis sampling needs 2 <= p < 4")
    M = _dense(M)
    N = _dense(N)
    n = N.shape[1]
    rows = max(M.shape[0], N.shape[0])
    C = _pad_rows(M, rows)
    D = _pad_rows(N, rows)
    tauC = leverage_scores(C)
    lew = lewis_weights(D, p, tol=tol)
    const = C_const if lew.converged else 2 * C_const
    nu = mixed_sampling_values(tauC, lew.tau, n, p, const)
    C_s, D_s, sample = sample_rows(C, D, nu, p, rng)
    info = {"rows_in": rows, "rows_out": C_s.shape[0], "draws": sample.count,
            "lewis_iterations": lew.iterations, "lewis_residual": lew.fixed_point_residual}
    return C_s, D_s, info
