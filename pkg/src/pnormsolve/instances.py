"""Problem formulations, objective evaluation and the residual model."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InfeasibleError, InvalidInputError, PropertyViolation
from .graph import Graph, components, incidence_matrix

FEASIBILITY_TOL = 1e-8


def as_csr(mat, shape=None):
    if mat is None:
        return sp.csr_matrix(shape)
    out = mat.tocsr() if sp.issparse(mat) else sp.csr_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))
    if shape is not None and out.shape != shape:
        raise InvalidInputError(f"matrix has shape {out.shape}, expected {shape}")
    out.sum_duplicates()
    return out


def power_sum(v, p):
    """``sum |v_i|^p``."""
    return float(np.sum(np.abs(v) ** p))


def null_space(mat, rtol=1e-10):
    """Orthonormal basis of the kernel of a dense matrix."""
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[1]
    if mat.shape[0] == 0:
        return np.eye(n)
    _, sv, vt = np.linalg.svd(mat, full_matrices=True)
    top = sv.max(initial=0.0)
    rank = int(np.sum(sv > rtol * max(top, 1e-300) * max(mat.shape))) if top > 0 else 0
    return vt[rank:].T.copy()


@dataclass(frozen=True)
class FlowStructure:
    """Marks a problem as a flow problem over ``graph`` with per-edge weights."""

    graph: Graph
    r: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class VoltageStructure:
    """Marks a problem as a voltage problem: ``M = diag(sqrt(w)) B``, ``N = diag(s) B``."""

    graph: Graph
    w: np.ndarray
    s: np.ndarray


@dataclass(eq=False)
class PNormProblem:
    """``min b^T x + ||M x||_2^2 + ||N x||_p^p`` subject to ``A x = c``."""

    A: sp.csr_matrix
    M: sp.csr_matrix
    N: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    p: float
    structure: object = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float).ravel()
        n = self.b.shape[0]
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.A = as_csr(self.A) if self.A is not None else sp.csr_matrix((0, n))
        self.M = as_csr(self.M) if self.M is not None else sp.csr_matrix((0, n))
        self.N = as_csr(self.N) if self.N is not None else sp.csr_matrix((0, n))
        for name in ("A", "M", "N"):
            if getattr(self, name).shape[1] != n:
                raise InvalidInputError(f"{name} must have {n} columns")
        if self.A.shape[0] != self.c.shape[0]:
            raise InvalidInputError("A and c disagree on the number of constraints")
        self.p = float(self.p)
        if not self.p >= 2:
            raise InvalidInputError("p must be at least 2")
        for name in ("A", "M", "N"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise InvalidInputError(f"{name} has non-finite entries")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.c))):
            raise InvalidInputError("b and c must be finite")

    @property
    def n(self):
        return self.b.shape[0]

    @property
    def m1(self):
        return self.N.shape[0]

    @cached_property
    def joint_kernel(self):
        """Orthonormal basis of ``ker M ∩ ker N ∩ ker A``."""
        stacked = sp.vstack([self.M, self.N, self.A]).toarray()
        return null_space(stacked)

    def feasibility_error(self, x):
        return float(np.linalg.norm(self.A @ x - self.c))

    def is_feasible(self, x, tol=FEASIBILITY_TOL):
        return self.feasibility_error(x) <= tol * (1 + np.linalg.norm(self.c))

    def validate(self, tol=FEASIBILITY_TOL):
        """Check that a feasible point exists and the objective is bounded below."""
        if self.A.shape[0]:
            dense = self.A.toarray()
            sol = np.linalg.lstsq(dense, self.c, rcond=None)[0]
            if np.linalg.norm(dense @ sol - self.c) > tol * (1 + np.linalg.norm(self.c)):
                raise InfeasibleError("c is not in the range of A")
        Z = self.joint_kernel
        if Z.shape[1] and np.linalg.norm(Z.T @ self.b) > tol * (1 + np.linalg.norm(self.b)):
            raise InvalidInputError("objective is unbounded: b has a component in the joint kernel")

    def with_p(self, p):
        return PNormProblem(self.A, self.M, self.N, self.b, self.c, p, self.structure)


def smoothed_power(r, s, x, p):
    """``sum r_i x_i^2 + s_i |x_i|^p``."""
    r, s, x = (np.asarray(v, dtype=float) for v in (r, s, x))
    if not (r.shape == s.shape == x.shape):
        raise InvalidInputError("r, s and x must have equal lengths")
    if np.any(r < 0) or np.any(s < 0):
        raise InvalidInputError("r and s must be non-negative")
    return float(np.sum(r * x * x) + np.sum(s * np.abs(x) ** p))


def objective_value(prob, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (prob.n,):
        raise InvalidInputError(f"x must have length {prob.n}")
    mx = prob.M @ x
    return float(prob.b @ x + mx @ mx + power_sum(prob.N @ x, prob.p))


@dataclass(frozen=True, eq=False)
class FlowInstance:
    """Gradient ``g``, quadratic weights ``r`` and p-th power weights ``s`` on the edges."""

    graph: Graph
    g: np.ndarray
    r: np.ndarray
    s: np.ndarray
    p: float

    def __post_init__(self):
        m = self.graph.edge_count
        for name in ("g", "r", "s"):
            v = np.asarray(getattr(self, name), dtype=float).ravel()
            if v.shape != (m,):
                raise InvalidInputError(f"{name} must have one entry per edge")
            if not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if np.any(self.r < 0) or np.any(self.s < 0):
            raise InvalidInputError("r and s must be non-negative")
        if not float(self.p) >= 2:
            raise InvalidInputError("p must be at least 2")
        object.__setattr__(self, "p", float(self.p))

    def replace(self, **changes):
        fields = dict(graph=self.graph, g=self.g, r=self.r, s=self.s, p=self.p)
        fields.update(changes)
        return FlowInstance(**fields)


@dataclass(frozen=True, eq=False)
class VoltageInstance:
    """Quadratic conductances ``w``, p-th power conductances ``s`` and demands ``d``."""

    graph: Graph
    w: np.ndarray
    s: np.ndarray
    d: np.ndarray
    p: float

    def __post_init__(self):
        m, n = self.graph.edge_count, self.graph.vertex_count
        for name, size in (("w", m), ("s", m), ("d", n)):
            v = np.asarray(getattr(self, name), dtype=float).ravel()
            if v.shape != (size,):
                raise InvalidInputError(f"{name} has the wrong length")
            if not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if np.any(self.w < 0) or np.any(self.s < 0):
            raise InvalidInputError("w and s must be non-negative")
        if not float(self.p) >= 2:
            raise InvalidInputError("p must be at least 2")
        object.__setattr__(self, "p", float(self.p))


def flow_objective(inst, f):
    """Maximization objective ``g^T f - h_p(r, s, f)``."""
    f = np.asarray(f, dtype=float)
    if f.shape != (inst.graph.edge_count,):
        raise InvalidInputError("flow must have one entry per edge")
    return float(inst.g @ f) - smoothed_power(inst.r, inst.s, f, inst.p)


def voltage_objective(inst, v):
    v = np.asarray(v, dtype=float)
    bv = incidence_matrix(inst.graph) @ v
    return float(inst.d @ v + np.sum(inst.w * bv * bv) + np.sum((inst.s * np.abs(bv)) ** inst.p))


def as_pnorm_problem(inst, demands=None):
    """Express a flow or voltage instance as a :class:`PNormProblem`.

    Flows: ``min g^T f + sum r f^2 + sum s |f|^p`` over ``B^T f = demands``, so
    the mapped objective at ``f`` equals ``-flow_objective(inst, -f)``.
    Voltages: ``min d^T v + ||W^{1/2} B v||^2 + ||diag(s) B v||_p^p``, unconstrained.
    """
    g = inst.graph
    B = incidence_matrix(g)
    if isinstance(inst, FlowInstance):
        c = np.zeros(g.vertex_count) if demands is None else np.asarray(demands, dtype=float)
        if c.shape != (g.vertex_count,):
            raise InvalidInputError("demands must have one entry per vertex")
        _check_balanced(g, c, np.ones(g.edge_count, dtype=bool))
        return PNormProblem(
            A=B.T.tocsr(), M=sp.diags(np.sqrt(inst.r)).tocsr(),
            N=sp.diags(inst.s ** (1.0 / inst.p)).tocsr(), b=inst.g, c=c, p=inst.p,
            structure=FlowStructure(g, inst.r, inst.s))
    if isinstance(inst, VoltageInstance):
        _check_balanced(g, inst.d, (inst.w > 0) | (inst.s > 0))
        return PNormProblem(
            A=sp.csr_matrix((0, g.vertex_count)), M=(sp.diags(np.sqrt(inst.w)) @ B).tocsr(),
            N=(sp.diags(inst.s) @ B).tocsr(), b=inst.d, c=np.zeros(0), p=inst.p,
            structure=VoltageStructure(g, inst.w, inst.s))
    raise InvalidInputError("expected a FlowInstance or VoltageInstance")


def _check_balanced(g, d, mask):
    labels = components(g, mask)
    sums = np.bincount(labels, weights=d, minlength=labels.max() + 1)
    if np.abs(sums).max(initial=0.0) > FEASIBILITY_TOL * (1 + np.abs(d).sum()):
        raise InfeasibleError("demands do not sum to zero on every connected component")


@dataclass(eq=False)
class ResidualProblem:
    """Local model ``res(D) = g^T D - D^T R D - ||N D||_p^p`` over ``A D = 0``.

    ``R = F^T F`` is kept in factored form. For residuals built at a point,
    ``F`` stacks ``sqrt(2)/p * M`` on top of ``diag(sqrt(2 dN)) N`` which gives
    ``R = (2/p^2) M^T M + 2 N^T diag(dN) N``.
    """

    g: np.ndarray
    quad_factor: sp.csr_matrix
    N: sp.csr_matrix
    p: float
    A: sp.csr_matrix
    M: sp.csr_matrix = None
    dN: np.ndarray = None
    structure: object = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.g.shape[0]

    def quad_form(self, delta):
        v = self.quad_factor @ delta
        return float(v @ v)

    def apply_R(self, delta):
        return self.quad_factor.T @ (self.quad_factor @ delta)


def build_residual(prob, x, check=True):
    x = np.asarray(x, dtype=float)
    if x.shape != (prob.n,):
        raise InvalidInputError(f"x must have length {prob.n}")
    if check and not prob.is_feasible(x, tol=1e-6):
        raise InfeasibleError("residual requested at an infeasible point")
    p = prob.p
    nx = prob.N @ x
    dN = np.abs(nx) ** (p - 2) if p > 2 else np.ones_like(nx)
    g = prob.b / p + (2.0 / p) * (prob.M.T @ (prob.M @ x)) + prob.N.T @ (dN * nx)
    F = sp.vstack([(np.sqrt(2.0) / p) * prob.M, sp.diags(np.sqrt(2.0 * dN)) @ prob.N]).tocsr()
    return ResidualProblem(g=g, quad_factor=F, N=prob.N, p=p, A=prob.A, M=prob.M, dN=dN,
                           structure=prob.structure)


def residual_value(res, delta):
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (res.n,):
        raise InvalidInputError(f"step must have length {res.n}")
    return float(res.g @ delta) - res.quad_form(delta) - power_sum(res.N @ delta, res.p)


def refinement_step(x, delta, p, prob=None, res=None, tol=1e-9):
    """``x - delta/p``; with ``prob`` and ``res`` given, also checks the descent bound."""
    x_new = np.asarray(x, dtype=float) - np.asarray(delta, dtype=float) / p
    if prob is not None and res is not None:
        value = residual_value(res, delta)
        if value >= 0:
            before = objective_value(prob, x)
            after = objective_value(prob, x_new)
            if after > before - value + tol * (1 + abs(before)):
                raise PropertyViolation(
                    f"descent bound failed: f(x')={after!r} > f(x)-res={before - value!r}")
    return x_new
