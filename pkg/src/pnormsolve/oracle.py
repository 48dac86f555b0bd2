"""Dense reference solvers used to certify optima at desk scale.

Deliberately independent of the main solver: everything is dense numpy,
constraints are eliminated through an explicit null-space basis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SolverFailure
from .instances import null_space


class OracleFailure(SolverFailure):
    pass


@dataclass
class OracleReport:
    x: np.ndarray
    f: float
    iterations: int
    feasibility: float
    stationarity: float
    converged: bool


class _Dense:
    def __init__(self, prob):
        self.A = prob.A.toarray()
        self.M = prob.M.toarray()
        self.N = prob.N.toarray()
        self.b = prob.b.copy()
        self.c = prob.c.copy()
        self.p = prob.p
        n = self.b.shape[0]
        if self.A.shape[0]:
            self.x_part = np.linalg.lstsq(self.A, self.c, rcond=None)[0]
            self.Z = null_space(self.A)
        else:
            self.x_part = np.zeros(n)
            self.Z = np.eye(n)

    def f(self, x):
        mx = self.M @ x
        return float(self.b @ x + mx @ mx + np.sum(np.abs(self.N @ x) ** self.p))

    def grad(self, x):
        nx = self.N @ x
        return self.b + 2 * self.M.T @ (self.M @ x) + self.p * self.N.T @ (np.abs(nx) ** (self.p - 2) * nx)

    def hess(self, x):
        nx = self.N @ x
        d = self.p * (self.p - 1) * np.abs(nx) ** (self.p - 2)
        return 2 * self.M.T @ self.M + (self.N.T * d) @ self.N


def newton_oracle(prob, tol=1e-11, max_iter=1000, x0=None):
    """Damped Newton on the null space of ``A``; returns an :class:`OracleReport`."""
    D = _Dense(prob)
    Z = D.Z
    x = D.x_part.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    fx = D.f(x)
    converged = False
    it = 0
    stall = 0
    for it in range(1, max_iter + 1):
        g = Z.T @ D.grad(x)
        H = Z.T @ D.hess(x) @ Z
        H = 0.5 * (H + H.T)
        step = -np.linalg.lstsq(H, g, rcond=1e-14)[0]
        decrement = float(-g @ step)
        if decrement < 0 or not np.all(np.isfinite(step)):
            step = -g
            decrement = float(g @ g)
        if decrement <= tol * tol * (1 + abs(fx)):
            converged = True
            break
        dx = Z @ step
        t = 1.0
        while True:
            x_new = x + t * dx
            f_new = D.f(x_new)
            if f_new <= fx - 0.25 * t * decrement:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20 or f_new >= fx:
            stall += 1
            # no representable decrease left: treat as converged when the gradient is tiny
            if stall >= 3 or np.linalg.norm(g) <= 1e-8 * (1 + np.linalg.norm(D.b)):
                converged = np.linalg.norm(g) <= 1e-6 * (1 + np.linalg.norm(D.grad(x)))
                break
            continue
        stall = 0
        x, fx = x_new, f_new
    x = _polish_feasibility(D, x)
    fx = D.f(x)
    feas = float(np.linalg.norm(D.A @ x - D.c)) if D.A.shape[0] else 0.0
    stat = float(np.linalg.norm(Z.T @ D.grad(x)))
    if not converged:
        raise OracleFailure(f"Newton oracle did not converge (stationarity {stat:.3e})", stat)
    return OracleReport(x, fx, it, feas, stat, converged)


def _polish_feasibility(D, x):
    if not D.A.shape[0]:
        return x
    resid = D.c - D.A @ x
    return x + np.linalg.lstsq(D.A, resid, rcond=None)[0]


def projected_gradient(prob, tol=1e-10, max_iter=200000, x0=None):
    """Projected gradient with Barzilai-Borwein steps and Armijo backtracking."""
    D = _Dense(prob)
    P = D.Z @ D.Z.T
    x = D.x_part.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    fx = D.f(x)
    g = P @ D.grad(x)
    t = 1.0 / max(np.linalg.norm(D.hess(x), 2), 1e-12)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gn = float(g @ g)
        if np.sqrt(gn) <= tol * (1 + abs(fx)):
            converged = True
            break
        step = t
        while True:
            x_new = x - step * g
            f_new = D.f(x_new)
            if f_new <= fx - 1e-4 * step * gn:
                break
            step *= 0.5
            if step < 1e-30:
                break
        if step < 1e-30:
            break
        g_new = P @ D.grad(x_new)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        t = float(s @ s) / sy if sy > 0 else 1.0
        x, fx, g = x_new, f_new, g_new
    stat = float(np.linalg.norm(g))
    feas = float(np.linalg.norm(D.A @ x - D.c)) if D.A.shape[0] else 0.0
    return OracleReport(x, fx, it, feas, stat, converged)
