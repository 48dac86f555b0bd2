"""Width-reduced multiplicative weights solver for mixed quadratic + p-norm energies.

Approximately solves ``min D^T M^T M D + ||N D||_p^p`` subject to ``A D = c``
given an upper bound ``nu`` on the optimum, by averaging the minimizers of a
sequence of weighted quadratic problems.
"""

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, PropertyViolation, UnsupportedError, WidthBudgetExceeded
from .instances import as_csr, power_sum
from .kkt import EqualityQP

DEFAULT_CONSTANTS = {"alpha": 1.0, "beta": 1.0, "rho": 1.0, "tau": 1.0}
TRACE_COLUMNS = ("step_index", "kind", "phi", "psi", "np_energy", "quad_energy", "wallclock_ns")


@dataclass(frozen=True)
class MwuParams:
    alpha: float
    beta: float
    rho: float
    tau: float
    T: int
    K_max: int
    m1: int
    p: float
    constants: dict = field(default_factory=lambda: dict(DEFAULT_CONSTANTS))


def mwu_params(m1, p, constants=None):
    consts = dict(DEFAULT_CONSTANTS)
    consts.update(constants or {})
    if m1 < 1:
        raise InvalidInputError("need at least one p-norm row")
    if not p > 2:
        raise UnsupportedError("the multiplicative weights loop needs p > 2")
    denom = 3 * p - 2
    alpha = consts["alpha"] / p * m1 ** (-(p * p - 5 * p + 2) / (p * denom))
    beta = consts["beta"] * m1 ** ((p - 2) / denom)
    rho = consts["rho"] * m1 ** ((p * p - 4 * p + 2) / (p * denom))
    tau = consts["tau"] * m1 ** ((p - 1) * (p - 2) / denom)
    T = math.ceil(m1 ** (1 / p) / alpha * (1 - 1e-12))
    K_max = math.ceil(2 ** (-p / (p - 2)) * rho ** 2 * m1 ** (2 / p) * beta ** (-2 / (p - 2)))
    return MwuParams(alpha, beta, rho, tau, T, K_max, int(m1), float(p), consts)


def _is_diagonal(mat):
    coo = mat.tocoo()
    return bool(np.all(coo.row == coo.col))


class OracleSystem:
    """Precomputed pieces of the weighted quadratic subproblem for one ``(A, M, N)``."""

    def __init__(self, A, M, N, p, m1=None, kernel=None, qp=None):
        self.A = as_csr(A)
        n = self.A.shape[1]
        self.M = as_csr(M) if M is not None else sp.csr_matrix((0, n))
        self.N = as_csr(N)
        self.p = float(p)
        self.m1 = int(m1 if m1 is not None else self.N.shape[0])
        self.qp = qp if qp is not None else EqualityQP(self.A, kernel)
        self.MtM = (self.M.T @ self.M).tocsr()
        self.N2 = self.N.multiply(self.N).T.tocsr()
        self.NtN_diag = _is_diagonal(self.N.T @ self.N)
        self.MtM_diag = _is_diagonal(self.MtM)
        n_cells = self.N.shape[0] * self.N.shape[1]
        self.dense = (not (self.NtN_diag and self.MtM_diag) and n_cells > 0
                      and self.N.nnz > 0.1 * n_cells and self.N.shape[1] <= 2000)
        if self.dense:
            self.N_dense = self.N.toarray()
            self.MtM_dense = self.MtM.toarray()
        self.m_weight = self.m1 ** ((self.p - 2) / self.p)
        self.r_weight = 3.0 ** (-(self.p - 2))

    def quadratic(self, r, m_scale=1.0):
        mw = self.m_weight * m_scale
        if self.NtN_diag and self.MtM_diag:
            return mw * self.MtM.diagonal() + self.r_weight * (self.N2 @ r)
        if self.dense:
            return mw * self.MtM_dense + self.r_weight * ((self.N_dense.T * r) @ self.N_dense)
        return (mw * self.MtM + self.r_weight * (self.N.T @ sp.diags(r) @ self.N)).tocsr()

    def solve(self, r, c, m_scale=1.0):
        return self.qp.solve(self.quadratic(r, m_scale), c)

    def value(self, delta, r, m_scale=1.0):
        md = self.M @ delta
        nd = self.N @ delta
        return float(self.m_weight * m_scale * (md @ md) + self.r_weight * np.sum(r * nd * nd))


def oracle_solve(A, M, N, c, w, p, m1=None, tol=1e-8, system=None):
    """Minimizer of ``m1^((p-2)/p) D^T M^T M D + 3^-(p-2) sum_e w_e^(p-2) (N D)_e^2`` on ``A D = c``."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 1 - 1e-12):
        raise InvalidInputError("weights must be at least 1")
    system = system or OracleSystem(A, M, N, p, m1)
    delta = system.solve(w ** (p - 2), c)
    err = np.linalg.norm(system.A @ delta - np.asarray(c, dtype=float))
    if err > max(tol, 1e-7) * (1 + np.linalg.norm(c)) * 10:
        raise InvalidInputError("constraint right-hand side is not in the range of A")
    return delta


def phi_potential(w, p):
    return power_sum(w, p)


def psi_potential(A, M, N, c, r, p, m1=None, system=None):
    system = system or OracleSystem(A, M, N, p, m1)
    delta = system.solve(np.asarray(r, dtype=float), c)
    return system.value(delta, r)


def scale_to_unit(A, M, N, c, p, nu):
    """Rescale so that an optimum below ``nu`` becomes an optimum below 1.

    Returns ``(A, M_scaled, N, c_scaled, factor)``; a solution ``y`` of the
    scaled problem maps back to ``factor * y``.
    """
    if not nu > 0:
        raise InvalidInputError("nu must be positive")
    M_scaled = None if M is None else nu ** (-(p - 2) / (2 * p)) * as_csr(M)
    return A, M_scaled, N, nu ** (-1 / p) * np.asarray(c, dtype=float), nu ** (1 / p)


@dataclass
class MwuState:
    w: np.ndarray
    x: np.ndarray
    i: int = 0
    k: int = 0
    trace: list = field(default_factory=list)


@dataclass
class MwuResult:
    x: np.ndarray
    params: MwuParams
    state: MwuState
    oracle_calls: int
    exhausted: bool = False
    quad_energy: float = 0.0
    p_energy: float = 0.0
    violations: list = field(default_factory=list)

    @property
    def trace(self):
        return self.state.trace

    def trace_csv(self):
        """Per-step trace; ``phi``/``psi`` are blank unless the run was instrumented."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for j, rec in enumerate(self.state.trace):
            row = [j, rec["kind"]]
            for key in TRACE_COLUMNS[2:]:
                value = rec.get(key)
                row.append("" if value is None else
                           format(value, ".17g") if isinstance(value, float) else value)
            writer.writerow(row)
        return buf.getvalue()


def _direct_quadratic(A, M, N, c, kernel, qp):
    """p = 2: ``min ||M D||^2 + ||N D||^2`` on ``A D = c`` in one solve."""
    A = as_csr(A)
    n = A.shape[1]
    M = as_csr(M) if M is not None else sp.csr_matrix((0, n))
    N = as_csr(N)
    Q = (M.T @ M + N.T @ N).tocsr()
    if _is_diagonal(Q):
        Q = Q.diagonal()
    qp = qp or EqualityQP(A, kernel)
    return qp.solve(Q, c)


def residual_solver(A, M, N, c, p, nu, params=None, constants=None, kernel=None, qp=None,
                    instrument=False, witness=None, strict=False, tol=1e-10):
    """Approximate ``min D^T M^T M D + ||N D||_p^p`` on ``A D = c`` given optimum <= ``nu``.

    With ``instrument`` every step records the potentials and the runtime
    checks; ``witness`` (an unscaled feasible point with energy <= nu) enables
    the checks that need a comparison point. ``strict`` raises on a failed
    check or on an exhausted width budget instead of flagging it.
    """
    A = as_csr(A)
    n = A.shape[1]
    M = as_csr(M) if M is not None else sp.csr_matrix((0, n))
    N = as_csr(N)
    c = np.asarray(c, dtype=float)
    p = float(p)
    if p == 2:
        x = _direct_quadratic(A, M, N, c, kernel, qp)
        mx = M @ x
        return MwuResult(x, None, MwuState(np.ones(N.shape[0]), x), 1,
                         quad_energy=float(mx @ mx), p_energy=power_sum(N @ x, p))
    if not nu > 0:
        raise InvalidInputError("nu must be positive")
    m1 = N.shape[0]
    params = params or mwu_params(m1, p, constants)
    _, Ms, _, cs, factor = scale_to_unit(A, M, N, c, p, nu)
    system = OracleSystem(A, Ms, N, p, m1, kernel=kernel, qp=qp)
    state = MwuState(np.ones(m1), np.zeros(n))
    violations = []
    calls = 0
    exhausted = False
    last = None
    prev_psi = None
    if witness is not None:
        wit = np.asarray(witness, dtype=float) / factor
        wit_m = Ms @ wit
        wit_quad = float(wit_m @ wit_m)
        wit_pnorm = power_sum(N @ wit, p) ** (1 / p)
    growth = 2 ** (1 / (p - 2))
    rel = 1e-9
    while state.i < params.T:
        t0 = time.perf_counter_ns()
        r = state.w ** (p - 2)
        delta = system.solve(r, cs)
        calls += 1
        last = delta
        nd = N @ delta
        energy = power_sum(nd, p)
        md = Ms @ delta
        quad = float(md @ md)
        record = {"i": state.i, "k": state.k, "np_energy": energy, "quad_energy": quad}
        if instrument:
            phi = phi_potential(state.w, p)
            psi = system.value(delta, r)
            weighted = float(np.sum(r * nd * nd))
            plain = float(nd @ nd)
            record.update(phi=phi, psi=psi)
            if plain > weighted * (1 + rel) + 1e-300:
                violations.append(("oracle_lower", state.i, state.k, plain, weighted))
            if prev_psi is not None and psi < prev_psi * (1 - 1e-7) - 1e-12:
                violations.append(("psi_monotone", state.i, state.k, prev_psi, psi))
            prev_psi = psi
            if witness is not None and wit_quad + wit_pnorm ** p <= 1 + 1e-9:
                wnorm = phi ** ((p - 2) / p)
                bound = system.m_weight * wit_quad + system.r_weight * wnorm * wit_pnorm ** 2
                if psi > bound * (1 + 1e-7) + 1e-12:
                    violations.append(("oracle_upper", state.i, state.k, psi, bound))
                if M.nnz == 0 and weighted > wnorm * (1 + 1e-7):
                    violations.append(("oracle_upper_literal", state.i, state.k, weighted, wnorm))
                sandwich = system.m_weight + system.r_weight * wnorm
                if psi > sandwich * (1 + 1e-7):
                    violations.append(("psi_sandwich", state.i, state.k, psi, sandwich))
        if energy <= params.tau:
            phi_old = phi_potential(state.w, p) if instrument else None
            state.w = state.w + params.alpha * np.abs(nd)
            state.x = state.x + params.alpha * delta
            state.i += 1
            record["kind"] = "flow"
            if instrument:
                phi_new = phi_potential(state.w, p)
                bound = (phi_old ** (1 / p) + 2 * params.alpha) ** p
                record["phi_after"] = phi_new
                if phi_new > bound * (1 + 1e-9):
                    violations.append(("phi_flow_step", state.i, state.k, phi_new, bound))
        else:
            mask = (np.abs(nd) >= params.rho) & (r <= params.beta)
            record["kind"] = "width"
            record["boosted"] = int(mask.sum())
            state.k += 1
            if not mask.any() or state.k > params.K_max:
                exhausted = True
                record["wallclock_ns"] = time.perf_counter_ns() - t0
                state.trace.append(record)
                break
            state.w = np.where(mask, state.w * growth, state.w)
        record["wallclock_ns"] = time.perf_counter_ns() - t0
        state.trace.append(record)

    if state.i > 0:
        x_scaled = state.x / (params.alpha * state.i)
    else:
        x_scaled = last if last is not None else np.zeros(n)
    x = factor * x_scaled
    mx = M @ x
    result = MwuResult(x, params, state, calls, exhausted, float(mx @ mx), power_sum(N @ x, p),
                       violations)
    if strict and violations:
        raise PropertyViolation(f"solver invariant failed: {violations[0]}")
    if strict and exhausted:
        raise WidthBudgetExceeded(f"width budget exceeded after {state.k} width steps")
    return result
