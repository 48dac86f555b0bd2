"""Command line entry point ``pnorm`` with generate / solve / sparsify / validate subcommands."""

import argparse
import csv
import io as _io
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .driver import SolveConfig, solve_pnorm
from .errors import (CycleTouchingError, InfeasibleError, InvalidInputError, PropertyViolation,
                     SolverFailure, StagnationError, UnboundedInstanceError, UnsupportedError,
                     WidthBudgetExceeded)
from .instances import build_residual, objective_value
from .oracle import newton_oracle

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_PROPERTY = 0, 2, 3, 4

TRACE_FIELDS = ("iteration", "stage", "p", "f_before", "f_after", "lower_bound", "gap_bound",
                "residual_value", "nu_count", "chosen", "step_scale", "oracle_calls")


@dataclass
class RunReport:
    instance: dict
    config: dict
    objective: float
    oracle_objective: float = None
    relative_gap: float = None
    outer_iterations: int = 0
    oracle_calls: int = 0
    status: str = ""
    seed: int = 0
    lower_bound: float = None
    iteration_bound: float = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, timings=False):
        out = asdict(self)
        if not timings:
            out.pop("timings")
        return out


def parse_constants(text):
    """``"alpha=2,tau=0.5"`` -> ``{"alpha": 2.0, "tau": 0.5}``."""
    if not text:
        return None
    out = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in ("alpha", "beta", "rho", "tau"):
            raise InvalidInputError(f"bad constant {item!r}; expected alpha|beta|rho|tau=value")
        try:
            out[key] = float(value)
        except ValueError as exc:
            raise InvalidInputError(f"bad constant value {value!r}") from exc
    return out


def fmt(x):
    """17 significant digits, enough to round-trip binary64."""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def trace_csv(records):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for rec in records:
        writer.writerow([fmt(getattr(rec, name)) for name in TRACE_FIELDS])
    return buf.getvalue()


def iteration_bound(p, kappa0, m, eps, schedule_len):
    return 8 * p * math.log(kappa0 * max(m, 2) / eps) * max(schedule_len, 1)


def relative_gap(f, f_star):
    return (f - f_star) / max(abs(f_star), 1e-300)


def run_solve(args):
    loaded = io.load_problem(args.input, args.p)
    prob = loaded.problem
    cfg = SolveConfig(epsilon=args.eps, sparsifier=args.sparsifier, seed=args.seed,
                      mwu_constants=parse_constants(args.constants), max_outer=args.max_outer)
    x, rep = solve_pnorm(prob, cfg)
    f = objective_value(prob, x)
    report = RunReport(
        instance={"path": os.path.basename(args.input), "kind": loaded.kind, "n": prob.n,
                  "rows": prob.m1, "p": prob.p},
        config={"epsilon": cfg.epsilon, "sparsifier": cfg.sparsifier, "constants": cfg.mwu_constants,
                "max_outer": cfg.max_outer, "threads": _threads()},
        objective=f, outer_iterations=rep.outer_iterations, oracle_calls=rep.oracle_calls,
        status=rep.status, seed=args.seed, lower_bound=rep.lower_bound,
        iteration_bound=iteration_bound(prob.p, rep.kappa0, prob.m1, cfg.epsilon,
                                        rep.nu_schedule_max),
        timings=rep.timings)
    if args.oracle == "on":
        ref = newton_oracle(prob)
        report.oracle_objective = ref.f
        report.relative_gap = relative_gap(f, ref.f)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(trace_csv(rep.records))
    if args.solution:
        io.save_json({"x": x.tolist()}, args.solution)
    _emit(report.to_dict(args.timings), args.report)
    return EXIT_OK


def _threads():
    value = os.environ.get("PNORM_THREADS")
    return int(value) if value and value.isdigit() else 1


def _emit(data, path):
    text = io.dumps(data)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def run_generate(args):
    data = io.generate_instance(args.kind, args.n, args.m, args.p, args.seed,
                                (args.weight_lo, args.weight_hi), args.constraints)
    if args.out:
        io.save_json(data, args.out)
    else:
        sys.stdout.write(io.dumps(data))
    return EXIT_OK


def voltage_sparsify_metrics(inst, seed, trials=200):
    from .graph import incidence_matrix
    from .voltage_sparsify import spanner_sparsify

    rng = np.random.default_rng(seed)
    out = spanner_sparsify(inst, 0.1, rng)
    B_G = incidence_matrix(inst.graph)
    B_H = incidence_matrix(out.graph)
    p, m = inst.p, inst.graph.edge_count
    lower_ok, upper_ok = True, True
    for _ in range(trials):
        v = rng.normal(size=inst.graph.vertex_count)
        full = np.linalg.norm(inst.s * (B_G @ v), ord=p)
        sparse = np.linalg.norm(out.t * (B_H @ v), ord=p)
        lower_ok &= bool(sparse <= full * (1 + 1e-12))
        upper_ok &= bool(full <= m ** (1 / p) * out.stretch * sparse * (1 + 1e-12))
    kept = {"spanner": out.spanner_edges.tolist(), "spectral": out.spectral_edges.tolist()}
    return dict(out.stats, kept_edge_indices=kept, sandwich_lower=lower_ok,
                sandwich_upper=upper_ok, samples=trials)


def lewis_sparsify_metrics(prob, seed, trials=200):
    from .lewis import sparsify_mixed_problem

    rng = np.random.default_rng(seed)
    if not prob.p < 4:
        raise UnsupportedError("Lewis sampling needs p < 4")
    M, N = prob.M.toarray(), prob.N.toarray()
    M_s, N_s, info = sparsify_mixed_problem(M, N, prob.p, rng)
    worst = 1.0
    for _ in range(trials):
        v = rng.normal(size=prob.n)
        for full, samp, q in ((M @ v, M_s @ v, 2.0), (N @ v, N_s @ v, prob.p)):
            a, b = np.linalg.norm(full, q), np.linalg.norm(samp, q)
            if a > 0:
                worst = max(worst, b / a, a / max(b, 1e-300))
    return dict(info, worst_ratio=worst, factor2=bool(worst <= 2), samples=trials)


def run_sparsify(args):
    loaded = io.load_problem(args.input, args.p)
    if args.kind == "voltage":
        if loaded.kind != "voltage":
            raise InvalidInputError("voltage sparsification needs a voltage instance")
        metrics = voltage_sparsify_metrics(loaded.instance, args.seed)
        ok = metrics["sandwich_lower"] and metrics["sandwich_upper"]
    else:
        metrics = lewis_sparsify_metrics(loaded.problem, args.seed)
        ok = True
    metrics = {"kind": args.kind, "seed": args.seed, **metrics}
    _emit(metrics, args.out)
    return EXIT_OK if ok else EXIT_PROPERTY


def validate_instance(loaded, seed, eps=1e-6):
    """Run the runtime invariant checks on one instance; returns ``{check: bool}``."""
    from .driver import quadratic_start
    from .mwu import residual_solver

    prob = loaded.problem
    checks = {}
    x, rep = solve_pnorm(prob, SolveConfig(epsilon=eps, seed=seed))
    f = objective_value(prob, x)
    checks["feasible"] = bool(prob.is_feasible(x))
    checks["monotone"] = all(r.f_after <= r.f_before for r in rep.records)
    checks["descent"] = all(after <= before - res + 1e-9 * (1 + abs(before))
                            for before, after, res in rep.descent_checks)
    ref = newton_oracle(prob)
    checks["oracle_gap"] = bool(abs(relative_gap(f, ref.f)) <= max(eps, 1e-12))
    checks["iteration_bound"] = rep.outer_iterations <= iteration_bound(
        prob.p, rep.kappa0, prob.m1, eps, rep.nu_schedule_max)
    if prob.p > 2 and prob.m1 > 0:
        x0 = quadratic_start(prob)
        res = build_residual(prob, x0)
        g = res.g
        if np.linalg.norm(g) > 0:
            import scipy.sparse as sp
            A_aug = sp.vstack([res.A, sp.csr_matrix(g.reshape(1, -1))]).tocsr()
            c = np.zeros(A_aug.shape[0])
            c[-1] = 1.0
            out = residual_solver(A_aug, res.quad_factor, res.N, c, res.p, 1.0, instrument=True)
            checks["mwu_invariants"] = not out.violations
    if loaded.kind == "voltage" and loaded.instance.graph.edge_count:
        metrics = voltage_sparsify_metrics(loaded.instance, seed, trials=50)
        checks["voltage_sandwich"] = metrics["sandwich_lower"] and metrics["sandwich_upper"]
    if loaded.kind == "flow":
        from .flowprep import check_approx_relation, flow_sparsify_pipeline
        out = flow_sparsify_pipeline(loaded.instance, loaded.demands)
        rng = np.random.default_rng(seed)
        checks["flow_forward"] = check_approx_relation(out.instance, loaded.instance, out.forward,
                                                       100, rng).passed
        if out.instance.graph.edge_count:
            checks["flow_backward"] = check_approx_relation(loaded.instance, out.instance,
                                                            out.backward, 100, rng).passed
    return checks


def run_validate(args):
    loaded = io.load_problem(args.input, args.p)
    checks = validate_instance(loaded, args.seed, args.eps)
    _emit({"checks": checks, "passed": all(checks.values())}, args.out)
    return EXIT_OK if all(checks.values()) else EXIT_PROPERTY


def build_parser():
    parser = argparse.ArgumentParser(prog="pnorm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a random instance")
    gen.add_argument("--kind", choices=io.KINDS, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--m", type=int, required=True)
    gen.add_argument("--p", type=float, default=4.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--weight-lo", type=float, default=0.1)
    gen.add_argument("--weight-hi", type=float, default=10.0)
    gen.add_argument("--constraints", type=int, default=None)
    gen.add_argument("--out")
    gen.set_defaults(func=run_generate)

    def common(p):
        p.add_argument("--input", required=True)
        p.add_argument("--p", type=float, default=None, help="override the stored exponent")
        p.add_argument("--seed", type=int, default=0)

    sol = sub.add_parser("solve", help="solve an instance")
    common(sol)
    sol.add_argument("--eps", type=float, default=1e-6)
    sol.add_argument("--sparsifier", choices=("identity", "voltage", "lewis"), default="identity")
    sol.add_argument("--trace")
    sol.add_argument("--oracle", choices=("on", "off"), default="off")
    sol.add_argument("--constants", default=None)
    sol.add_argument("--max-outer", type=int, default=None)
    sol.add_argument("--report")
    sol.add_argument("--solution")
    sol.add_argument("--timings", action="store_true", help="include wall-clock timings")
    sol.set_defaults(func=run_solve)

    spz = sub.add_parser("sparsify", help="run a sparsifier and report quality metrics")
    common(spz)
    spz.add_argument("--kind", choices=("voltage", "lewis"), required=True)
    spz.add_argument("--out")
    spz.set_defaults(func=run_sparsify)

    val = sub.add_parser("validate", help="run the invariant checks on an instance")
    common(val)
    val.add_argument("--eps", type=float, default=1e-6)
    val.add_argument("--out")
    val.set_defaults(func=run_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, InfeasibleError, UnboundedInstanceError, CycleTouchingError,
            UnsupportedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PropertyViolation as exc:
        print(f"property violation: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    except (SolverFailure, StagnationError, WidthBudgetExceeded) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
