"""Equality-constrained convex quadratic minimization.

Solves ``min D^T Q D + lin^T D`` subject to ``A D = c`` for positive
semidefinite ``Q`` by eliminating the constraint block through its Schur
complement ``A Q^{-1} A^T``.
"""

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidInputError, SolverFailure
from .graph import DENSE_THRESHOLD


def independent_rows(A, rtol=1e-10):
    """Indices of a maximal linearly independent subset of the rows of ``A``."""
    d = A.shape[0]
    if d == 0:
        return np.zeros(0, dtype=np.int64)
    dense = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    _, R, piv = la.qr(dense.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(0, dtype=np.int64)
    rank = int(np.sum(diag > rtol * diag[0] * max(dense.shape)))
    return np.sort(piv[:rank])


class EqualityQP:
    """Reusable solver for quadratics sharing one constraint matrix.

    ``kernel`` is an orthonormal basis of directions invisible to both ``Q``
    and ``A``; they are pinned to zero so that the solution is unique.
    """

    def __init__(self, A, kernel=None, dense_threshold=DENSE_THRESHOLD):
        A = sp.csr_matrix(A)
        self.n = A.shape[1]
        self.rows = independent_rows(A)
        self.A_full = A
        self.A = A[self.rows] if len(self.rows) < A.shape[0] else A
        self.Z = None if kernel is None or kernel.shape[1] == 0 else np.asarray(kernel)
        self.dense_threshold = dense_threshold
        self.A_dense = self.A.toarray() if self.n <= dense_threshold else None

    def solve(self, Q, c, lin=None):
        c = np.asarray(c, dtype=float)
        c_red = c[self.rows] if len(self.rows) < c.shape[0] else c
        if lin is not None:
            lin = np.asarray(lin, dtype=float)
            if self.Z is not None and np.linalg.norm(self.Z.T @ lin) > 1e-8 * (1 + np.linalg.norm(lin)):
                raise InvalidInputError("linear term is unbounded along the joint kernel")
        if isinstance(Q, np.ndarray) and Q.ndim == 1:
            top = Q.max(initial=0.0)
            if self.Z is None and top > 0 and Q.min() > 1e-14 * top:
                delta = self._solve_diagonal(Q, c_red, lin)
            else:
                delta = self._solve_general(sp.diags(Q).tocsr(), c_red, lin)
        else:
            delta = self._solve_general(Q, c_red, lin)
        if not np.all(np.isfinite(delta)):
            raise SolverFailure("quadratic solve produced non-finite values")
        return delta

    def _schur_solve(self, S, rhs):
        if S.shape[0] == 0:
            return np.zeros(0)
        try:
            factor = la.cho_factor(S, lower=True, check_finite=False)
            return la.cho_solve(factor, rhs, check_finite=False)
        except la.LinAlgError:
            return np.linalg.lstsq(S, rhs, rcond=None)[0]

    def _solve_diagonal(self, q, c, lin):
        A = self.A
        inv = 1.0 / q
        lin_term = np.zeros(self.n) if lin is None else lin
        if A.shape[0] == 0:
            return -0.5 * lin_term * inv
        AQ = A @ sp.diags(inv)
        S = (AQ @ A.T).toarray()
        S = 0.5 * (S + S.T)
        rhs = 2 * c + AQ @ lin_term
        y = self._schur_solve(S, rhs)
        delta = 0.5 * inv * (A.T @ y - lin_term)
        # one round of refinement on the constraint residual
        resid = c - A @ delta
        if np.linalg.norm(resid) > 0:
            y2 = self._schur_solve(S, 2 * resid)
            delta = delta + 0.5 * inv * (A.T @ y2)
        return delta

    def _regularized(self, Q):
        A = self.A
        n = self.n
        dense = n <= self.dense_threshold
        if dense:
            Qd = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
            scale = np.trace(Qd) / n
        else:
            Qd = sp.csr_matrix(Q)
            scale = Qd.diagonal().sum() / n
        if scale <= 0:
            scale = 1.0
        if A.shape[0]:
            a_scale = spla.norm(A) ** 2 / n
            gamma = scale / a_scale if a_scale > 0 else 0.0
            AtA = (A.T @ A)
            Qd = Qd + gamma * (AtA.toarray() if dense else AtA)
        if self.Z is not None:
            zz = scale * (self.Z @ self.Z.T)
            Qd = Qd + zz if dense else sp.csr_matrix(Qd + zz)
        return Qd, dense

    def _solve_general(self, Q, c, lin):
        A = self.A
        n = self.n
        lin_term = np.zeros(n) if lin is None else lin
        Qr, dense = self._regularized(Q)
        if not dense:
            return self._solve_sparse_kkt(Qr, c, lin_term)
        Qr = 0.5 * (Qr + Qr.T)
        try:
            factor = la.cho_factor(Qr, lower=True, check_finite=False)

            def qsolve(v):
                return la.cho_solve(factor, v, check_finite=False)
        except la.LinAlgError:
            pinv = np.linalg.pinv(Qr, rcond=1e-13, hermitian=True)

            def qsolve(v):
                return pinv @ v
        if A.shape[0] == 0:
            return -0.5 * qsolve(lin_term)
        Ad = self.A_dense
        QiAt = qsolve(Ad.T)
        S = Ad @ QiAt
        S = 0.5 * (S + S.T)
        Qil = qsolve(lin_term)
        y = self._schur_solve(S, 2 * c + Ad @ Qil)
        delta = 0.5 * (QiAt @ y - Qil)
        resid = c - Ad @ delta
        if np.linalg.norm(resid) > 0:
            y2 = self._schur_solve(S, 2 * resid)
            delta = delta + 0.5 * (QiAt @ y2)
        return delta

    def _solve_sparse_kkt(self, Qr, c, lin):
        A = self.A
        K = sp.bmat([[2 * Qr, A.T], [A, None]], format="csc")
        rhs = np.concatenate([-lin, c])
        sol = spla.splu(K).solve(rhs)
        return sol[: self.n]
