"""Iterative refinement for mixed quadratic + p-norm problems.

Each outer iteration builds the residual model at the current point, sweeps a
halving schedule of guesses ``nu`` for the achievable residual value, solves a
decision version of the residual problem for each guess with the
multiplicative-weights solver and moves to the best candidate.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from .errors import (DegenerateGradient, InvalidInputError, PropertyViolation, StagnationError,
                     UnsupportedError)
from .graph import components, incidence_matrix
from .instances import (ResidualProblem, VoltageInstance, VoltageStructure, build_residual,
                        null_space, objective_value, power_sum, residual_value)
from .kkt import EqualityQP
from .lewis import sparsify_mixed_problem
from .mwu import residual_solver
from .voltage_sparsify import spanner_sparsify, voltage_scaling


@dataclass
class SolveConfig:
    epsilon: float = 1e-6
    kappa0: float = None
    sparsifier: str = "identity"
    mwu_constants: dict = None
    max_outer: int = None
    seed: int = 0
    b_window: float = 40.0
    line_search: bool = True
    homotopy: bool = True
    homotopy_iterations: int = 12
    check_descent: bool = True
    raise_on_stagnation: bool = True
    lewis_constant: float = 8.0
    sparsify_delta: float = 0.1
    spectral_constant: float = 1.0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise InvalidInputError("epsilon must lie in (0, 1)")
        if self.kappa0 is not None and self.kappa0 < 1:
            raise InvalidInputError("kappa0 must be at least 1")
        if self.sparsifier not in ("identity", "voltage", "lewis"):
            raise InvalidInputError(f"unknown sparsifier {self.sparsifier!r}")


@dataclass
class ReductionFactors:
    a: float = 0.5
    b: float = 1.0
    mu1: float = 1.0
    kappa1: float = 1.0
    mu2: float = 1.0
    kappa2: float = 1.0
    kappa3: float = 1.0
    kappa4: float = 1.0
    reduced: bool = False


def nu_schedule(f0, kappa, p, epsilon):
    """Halving guesses ``f0, f0/2, ...`` down to about ``epsilon f0 / (kappa p)``."""
    if f0 <= 0:
        return []
    ratio = kappa * p / epsilon
    length = max(0, math.ceil(math.log2(ratio) - 1e-12)) + 1 if ratio > 1 else 1
    return [f0 / 2 ** j for j in range(length)]


def logm_exponent(m):
    return max(2, math.ceil(math.log(m)))


def p_to_q_alpha(a, b, beta, m, p, q):
    """Scale turning a ``beta``-approximate q-residual solution into a p-residual one."""
    expo = (p / (p - 1)) * (1 / q - 1 / p)
    return (a / (4 * b * beta)) * m ** (-expo - 1 / (q - 1))


def p_to_q_factor(a, b, beta, m, p, q):
    expo = (p / (p - 1)) * (1 / q - 1 / p)
    return 8 * (b * beta ** 2 / a ** 2) * m ** (expo + 1 / (q - 1))


def reduce_to_logm_norm(res, nu, m, b_window=40.0):
    """Swap the p-norm term for a ``ceil(ln m)``-norm term with the same scale at ``nu``.

    Returns ``(res', p', factors)``; when ``p <= ln m`` nothing changes and
    ``factors.reduced`` is false.
    """
    p = res.p
    if p <= math.log(m):
        return res, p, ReductionFactors()
    q = logm_exponent(m)
    scale = 2 ** (-1 / q) * (nu / m) ** (1 / q - 1 / p)
    reduced = ResidualProblem(g=res.g, quad_factor=res.quad_factor, N=scale * res.N, p=float(q),
                              A=res.A, structure=res.structure, meta=dict(res.meta))
    beta = 1.0
    factors = ReductionFactors(a=1 / 33, b=b_window, reduced=True,
                               mu1=p_to_q_alpha(1 / 33, b_window, beta, m, p, q),
                               kappa1=p_to_q_factor(1 / 33, b_window, beta, m, p, q))
    return reduced, float(q), factors


def decision_scale(delta, factors, p):
    """Scale a decision-problem solution into a residual candidate."""
    s = factors.a / (2 * factors.b * factors.kappa3 * factors.kappa4 ** (1 / (p - 1)))
    return s * factors.mu2 * factors.mu1 * np.asarray(delta, dtype=float)


@dataclass
class DecisionResult:
    delta: np.ndarray
    kappa3: float
    kappa4: float
    oracle_calls: int
    exhausted: bool


def _augmented_system(res, kernel):
    A_aug = sp.vstack([res.A, sp.csr_matrix(res.g.reshape(1, -1))]).tocsr()
    return A_aug, EqualityQP(A_aug, kernel)


def solve_decision_form(res, nu, a, b=1.0, kernel=None, constants=None, qp=None, A_aug=None):
    """Approximately minimize ``D^T R D + ||N D||_p^p`` over ``g^T D = a nu``, ``A D = 0``."""
    g = res.g
    if A_aug is None:
        _check_gradient(res)
        A_aug, qp = _augmented_system(res, kernel)
    c = np.zeros(A_aug.shape[0])
    c[-1] = a * nu
    out = residual_solver(A_aug, res.quad_factor, res.N, c, res.p, b * nu, constants=constants,
                          kernel=kernel, qp=qp)
    delta = out.x
    # the last constraint carries the only non-zero target; rescale to hit it exactly
    reached = float(g @ delta)
    if reached != 0 and abs(reached - a * nu) > 1e-12 * abs(a * nu):
        delta = delta * (a * nu / reached)
    quad = res.quad_form(delta)
    pe = power_sum(res.N @ delta, res.p)
    return DecisionResult(delta, max(1.0, quad / (b * nu)), max(1.0, pe / (b * nu)),
                          out.oracle_calls, out.exhausted)


def _check_gradient(res, kernel=None):
    g = res.g
    if res.A.shape[0]:
        A = res.A.toarray()
        proj = g - A.T @ np.linalg.lstsq(A.T, g, rcond=None)[0]
    else:
        proj = g
    if np.linalg.norm(proj) <= 1e-12 * max(np.linalg.norm(g), 1e-300) or not np.any(g):
        raise DegenerateGradient("gradient is orthogonal to the feasible directions")


def select_best_step(candidates, prob, x, p=None):
    """Index and step minimizing ``f(x - step/p)``; index -1 means the zero step."""
    p = prob.p if p is None else p
    best_val = objective_value(prob, x)
    best = (-1, np.zeros_like(x))
    for j, cand in enumerate(candidates):
        val = objective_value(prob, x - cand / p)
        if val < best_val:
            best_val = val
            best = (j, cand)
    return best


def line_search(prob, x, direction, f0=None):
    """Multiplier ``t >= 0`` minimizing the convex function ``f(x - t direction / p)``.

    The bracket starts at a trial length comparable to ``x`` itself, so the
    result does not depend on how ``direction`` was scaled.
    """
    p = prob.p
    f0 = objective_value(prob, x) if f0 is None else f0
    size = np.linalg.norm(direction) / p
    if size == 0 or not np.isfinite(size):
        return 0.0, f0

    def phi(t):
        return objective_value(prob, x - t * direction / p)

    vals = {0.0: f0}
    t = 1e-2 * max(np.linalg.norm(x), 1e-8 * size) / size
    floor = t * 1e-30
    vals[t] = phi(t)
    if vals[t] < f0:
        while True:
            nt = 2 * t
            vals[nt] = phi(nt)
            if vals[nt] >= vals[t] or nt > 1e60 * floor:
                break
            t = nt
        lo, hi = t / 2, 2 * t
    else:
        while t > floor:
            t /= 2
            vals[t] = phi(t)
            if vals[t] < f0:
                break
        else:
            return 0.0, f0
        lo, hi = 0.0, 2 * t
    out = minimize_scalar(phi, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10 * hi, "maxiter": 200})
    vals[float(out.x)] = float(out.fun)
    t_best = min(vals, key=lambda k: (vals[k], k))
    return t_best, vals[t_best]


def quadratic_minorant_bound(prob, x, kernel=None, qp=None):
    """Certified lower bound on the optimum from a tangent quadratic minorant of ``|u|^p``.

    Each ``|u|^p`` is bounded below by ``a u^2 - C`` touching at ``u = (N x)_i``
    (or at a small floor value when that entry is tiny), so minimizing the
    resulting quadratic over the constraints gives a lower bound that is tight
    at the optimum.
    """
    p = prob.p
    y = np.abs(prob.N @ x)
    if p == 2:
        a = np.ones_like(y)
        C = np.zeros_like(y)
    else:
        scale = y.max(initial=0.0)
        floor = max(1e-3 * scale, 1e-150)
        touch = np.maximum(y, floor)
        a = 0.5 * p * touch ** (p - 2)
        C = a * touch ** 2 * (1 - 2 / p)
    Q = (prob.M.T @ prob.M + prob.N.T @ sp.diags(a) @ prob.N).tocsr()
    coo = Q.tocoo()
    if np.all(coo.row == coo.col):
        Q = Q.diagonal()
    qp = qp or EqualityQP(prob.A, prob.joint_kernel if kernel is None else kernel)
    z = qp.solve(Q, prob.c, lin=prob.b)
    mz = prob.M @ z
    nz = prob.N @ z
    return float(prob.b @ z + mz @ mz + np.sum(a * nz * nz) - C.sum())


@dataclass
class SparseResidual:
    res: ResidualProblem
    mu2: float
    kappa2: float
    kernel: np.ndarray
    info: dict = field(default_factory=dict)


def dispatch_sparsify(res, cfg, rng=None, kernel=None, p=None):
    """Sparsified stand-in for a residual problem plus its scaling and loss factors.

    ``p`` overrides the exponent used by the sparsifier (the p-norm term is
    rescaled afterwards, which commutes with row and edge sampling).
    """
    p = res.p if p is None else p
    kind = cfg.sparsifier if isinstance(cfg, SolveConfig) else cfg
    if kind == "identity":
        return SparseResidual(res, 1.0, 1.0, kernel)
    rng = rng if rng is not None else np.random.default_rng(getattr(cfg, "seed", 0))
    if kind == "voltage":
        st = res.structure
        if not isinstance(st, VoltageStructure):
            raise UnsupportedError("voltage sparsification needs a voltage problem")
        graph = st.graph
        B = incidence_matrix(graph)
        # quadratic part of the residual is a Laplacian: R = B^T diag(w_R) B
        dN = res.dN if res.dN is not None else np.zeros(graph.edge_count)
        w_R = (2 / res.p ** 2) * st.w + 2 * st.s ** 2 * dN
        s_scale = _row_scale(res.N, sp.diags(st.s) @ B)
        inst = VoltageInstance(graph, w_R, st.s * s_scale, np.zeros(graph.vertex_count), p)
        out = spanner_sparsify(inst, getattr(cfg, "sparsify_delta", 0.1), rng,
                               getattr(cfg, "spectral_constant", 1.0))
        B_H = incidence_matrix(out.graph)
        F = (sp.diags(np.sqrt(out.u)) @ B_H).tocsr()
        N_s = (sp.diags(out.t) @ B_H).tocsr()
        sparse = ResidualProblem(g=res.g, quad_factor=F, N=N_s, p=res.p, A=res.A,
                                 structure=res.structure, meta={"sparsified": "voltage"})
        mu2, kappa2 = voltage_scaling(graph.edge_count, p, graph.vertex_count)
        labels = components(out.graph, (out.u > 0) | (out.t > 0))
        Z = _component_indicators(labels)
        return SparseResidual(sparse, mu2, kappa2, Z, out.stats)
    if kind == "lewis":
        if not p < 4:
            raise UnsupportedError("Lewis sampling needs the working exponent below 4")
        F, N = res.quad_factor, res.N
        if F.shape[0] >= N.shape[0]:
            # align each p-norm row with the quadratic row built from it
            pad = F.shape[0] - N.shape[0]
            N_al = sp.vstack([sp.csr_matrix((pad, N.shape[1])), N]).tocsr()
            F_al = F
        else:
            F_al = sp.vstack([F, sp.csr_matrix((N.shape[0] - F.shape[0], F.shape[1]))]).tocsr()
            N_al = N
        C_s, D_s, info = sparsify_mixed_problem(F_al, N_al, p, rng,
                                                getattr(cfg, "lewis_constant", 8.0))
        sparse = ResidualProblem(g=res.g, quad_factor=sp.csr_matrix(C_s), N=sp.csr_matrix(D_s),
                                 p=res.p, A=res.A, structure=res.structure,
                                 meta={"sparsified": "lewis"})
        Z = null_space(np.vstack([C_s, D_s, res.A.toarray()]))
        return SparseResidual(sparse, 1.0, 256.0, Z, info)
    raise InvalidInputError(f"unknown sparsifier {kind!r}")


def _row_scale(N, reference):
    """Scalar c with N = c * reference (used after a p-reduction rescaled N)."""
    ref = reference.tocsr()
    num = N.multiply(ref).sum()
    den = ref.multiply(ref).sum()
    return float(num / den) if den > 0 else 1.0


def _component_indicators(labels):
    k = labels.max() + 1
    Z = np.zeros((labels.size, k))
    Z[np.arange(labels.size), labels] = 1.0
    return Z / np.sqrt(Z.sum(axis=0))


@dataclass
class OuterRecord:
    iteration: int
    p: float
    f_before: float
    f_after: float
    lower_bound: float
    gap_bound: float
    residual_value: float
    nu_count: int
    chosen: int
    step_scale: float
    oracle_calls: int
    stage: str


@dataclass
class SolveReport:
    status: str = "running"
    outer_iterations: int = 0
    oracle_calls: int = 0
    records: list = field(default_factory=list)
    homotopy: list = field(default_factory=list)
    kappa0: float = 1.0
    nu_schedule_max: int = 0
    initial_objective: float = None
    final_objective: float = None
    lower_bound: float = None
    timings: dict = field(default_factory=dict)
    descent_checks: list = field(default_factory=list)

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k not in ("records", "descent_checks")}
        out["records"] = [r.__dict__ for r in self.records]
        out["descent_checks"] = [list(d) for d in self.descent_checks]
        return out


def _default_budget(prob, cfg, kappa0):
    m = max(prob.m1, 2)
    est = 4 * prob.p * math.ceil(math.log(kappa0 * m / cfg.epsilon))
    return int(min(max(est, 50), 2000))


def _stop_threshold(f, lb, eps, start_gap):
    # f* lies in [lb, f]; certify relative accuracy when |f*| is bounded away from zero
    certified = 0.5 * eps * max(lb, -f, 0.0)
    return certified if certified > 0 else 1e-3 * eps * start_gap


class _Refiner:
    """Shared state for homotopy stages and the final refinement."""

    def __init__(self, prob, cfg, report, rng):
        self.base = prob
        self.cfg = cfg
        self.report = report
        self.rng = rng
        self.kernel = prob.joint_kernel
        self.bound_qp = EqualityQP(prob.A, self.kernel)
        self.timing = report.timings

    def _tick(self, key, t0):
        self.timing[key] = self.timing.get(key, 0.0) + time.perf_counter() - t0

    def run(self, prob, x, eps, max_outer, stage, relative_target=None):
        cfg = self.cfg
        report = self.report
        p = prob.p
        m = max(prob.m1, 1)
        f = objective_value(prob, x)
        start_gap = None
        for _ in range(max_outer):
            t0 = time.perf_counter()
            lb = quadratic_minorant_bound(prob, x, self.kernel, self.bound_qp)
            self._tick("lower_bound", t0)
            gap = max(f - lb, 0.0)
            if start_gap is None:
                start_gap = gap
            if gap <= _stop_threshold(f, lb, eps, start_gap) or gap <= 1e-15 * (abs(f) + abs(lb)) or gap == 0:
                return x, f, lb, "converged"
            if relative_target is not None and gap <= relative_target * start_gap:
                return x, f, lb, "converged"
            t0 = time.perf_counter()
            res = build_residual(prob, x)
            self._tick("residual", t0)
            try:
                _check_gradient(res)
            except DegenerateGradient:
                return x, f, lb, "converged"
            reduced = p > math.log(m)
            p_work = float(logm_exponent(m)) if reduced else p
            t0 = time.perf_counter()
            sparse = dispatch_sparsify(res, cfg, self.rng, self.kernel, p=p_work)
            self._tick("sparsify", t0)
            sres = sparse.res
            A_aug, qp = _augmented_system(sres, sparse.kernel)
            # absolute accuracy worth resolving in this iteration
            target = eps * max(abs(f), abs(lb), 1e-300)
            sched = nu_schedule(gap, 16.0, p, min(max(target / gap, 1e-16), 0.5))
            report.nu_schedule_max = max(report.nu_schedule_max, len(sched))
            candidates = []
            calls = 0
            t0 = time.perf_counter()
            for nu in sched:
                if reduced:
                    work, _, factors = reduce_to_logm_norm(sres, nu, m, cfg.b_window)
                else:
                    work, factors = sres, ReductionFactors()
                dec = solve_decision_form(work, nu, factors.a, factors.b, sparse.kernel,
                                          cfg.mwu_constants, qp=qp, A_aug=A_aug)
                calls += dec.oracle_calls
                factors.kappa3, factors.kappa4 = dec.kappa3, dec.kappa4
                factors.mu2, factors.kappa2 = sparse.mu2, sparse.kappa2
                if factors.reduced:
                    beta = (16 * factors.b ** 2 * dec.kappa3 * dec.kappa4 ** (1 / (p_work - 1))
                            * sparse.kappa2 / factors.a ** 2)
                    factors.mu1 = p_to_q_alpha(factors.a, factors.b, beta, m, p, p_work)
                    factors.kappa1 = p_to_q_factor(factors.a, factors.b, beta, m, p, p_work)
                candidates.append(decision_scale(dec.delta, factors, p_work))
            self._tick("decision", t0)
            report.oracle_calls += calls
            t0 = time.perf_counter()
            chosen, step = select_best_step(candidates, prob, x)
            scale = 1.0
            if cfg.line_search:
                best_val = objective_value(prob, x - step / p)
                for j, cand in enumerate(candidates):
                    t, val = line_search(prob, x, cand, f)
                    if val < best_val:
                        best_val, chosen, step, scale = val, j, t * cand, t
            self._tick("step_selection", t0)
            x_new = x - step / p
            f_new = objective_value(prob, x_new)
            res_val = residual_value(res, step)
            report.descent_checks.append((f, f_new, res_val))
            if cfg.check_descent and f_new > f - res_val + 1e-9 * (1 + abs(f)):
                raise PropertyViolation(
                    f"descent bound failed: f(x')={f_new!r}, f(x)-res={f - res_val!r}")
            report.outer_iterations += 1
            report.records.append(OuterRecord(report.outer_iterations, p, f, f_new, lb, gap,
                                              res_val, len(sched), chosen, scale, calls, stage))
            if not f_new < f:
                if gap <= 1e-9 * max(abs(f), abs(lb), 1e-300):
                    return x, f, lb, "converged"
                if cfg.raise_on_stagnation:
                    raise StagnationError(f"no decrease in outer iteration {report.outer_iterations}"
                                          f" (gap bound {gap:.3e})")
                return x, f, lb, "stagnated"
            x, f = x_new, f_new
        lb = quadratic_minorant_bound(prob, x, self.kernel, self.bound_qp)
        return x, f, lb, "budget"


def quadratic_start(prob, kernel=None):
    """Exact minimizer of the p = 2 analogue ``b^T x + ||M x||^2 + ||N x||^2``."""
    Q = (prob.M.T @ prob.M + prob.N.T @ prob.N).tocsr()
    coo = Q.tocoo()
    if np.all(coo.row == coo.col):
        Q = Q.diagonal()
    qp = EqualityQP(prob.A, prob.joint_kernel if kernel is None else kernel)
    return qp.solve(Q, prob.c, lin=prob.b)


def homotopy_init(prob, cfg=None, report=None, rng=None):
    """Feasible starting point: quadratic solve, then constant-accuracy passes at p = 4, 8, ...

    Returns ``(x0, kappa)``.
    """
    cfg = cfg or SolveConfig()
    report = report if report is not None else SolveReport()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    x = quadratic_start(prob)
    report.homotopy.append({"p": 2.0, "objective": objective_value(prob.with_p(2), x)})
    if prob.p == 2:
        report.timings["homotopy"] = time.perf_counter() - t0
        return x, 1.0
    refiner = _Refiner(prob, cfg, report, rng)
    k = 1
    while True:
        pk = min(2.0 ** (k + 1), prob.p)
        stage = prob.with_p(pk)
        x, f, lb, status = refiner.run(stage, x, 0.5, cfg.homotopy_iterations, f"homotopy p={pk:g}",
                                       relative_target=0.5)
        report.homotopy.append({"p": pk, "objective": f, "lower_bound": lb, "status": status})
        if pk >= prob.p:
            break
        k += 1
    report.timings["homotopy"] = time.perf_counter() - t0
    return x, float(max(prob.m1, 1))


def solve_pnorm(prob, cfg=None):
    """Approximately minimize ``prob`` to relative accuracy ``cfg.epsilon``.

    Returns ``(x, report)``.
    """
    cfg = cfg or SolveConfig()
    prob.validate()
    report = SolveReport()
    rng = np.random.default_rng(cfg.seed)
    t_start = time.perf_counter()
    if cfg.homotopy:
        x, kappa = homotopy_init(prob, cfg, report, rng)
    else:
        x = quadratic_start(prob)
        kappa = float(max(prob.m1, 1))
    kappa0 = cfg.kappa0 or kappa
    report.kappa0 = kappa0
    report.initial_objective = objective_value(prob, x)
    max_outer = cfg.max_outer or _default_budget(prob, cfg, kappa0)
    refiner = _Refiner(prob, cfg, report, rng)
    x, f, lb, status = refiner.run(prob, x, cfg.epsilon, max_outer, "main")
    report.status = status
    report.final_objective = f
    report.lower_bound = lb
    report.timings["total"] = time.perf_counter() - t_start
    return x, report
