"""Command-line entry point: ``splinebsde {solve,convergence,stability,weights}``.

On failure the last line on stderr is a JSON object
``{"error": <exception type>, "message": <text>}`` and the exit status is 1
(2 for malformed command lines).
"""
from __future__ import annotations

import argparse
import ast
import json
import sys

from .convergence import ExperimentSpec, emit_report, markdown_table, run_experiment
from .field import WORKERS_ENV
from .problems import PROBLEMS, make_problem
from .solver import BOOTSTRAP_MODES, SolverConfig, solve
from .stability import analyze, characteristic_polynomial
from .weights import default_kind, derive_y_weights, derive_z_weights


def _q(value: str):
    if value == "auto":
        return None
    q = int(value)
    if q < 1:
        raise argparse.ArgumentTypeError("q must be positive or 'auto'")
    return q


def _param(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    return key.strip(), value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="splinebsde",
        description="Multistep BSDE solver with spline-based weights.",
        epilog=f"Set {WORKERS_ENV} to control the number of worker threads/processes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve one problem and print y0, z0 and errors")
    p.add_argument("--problem", required=True, help=f"one of {', '.join(sorted(PROBLEMS))}")
    p.add_argument("--ky", type=int, required=True)
    p.add_argument("--kz", type=int, required=True)
    p.add_argument("--nt", type=int, required=True)
    p.add_argument("--L", type=int, default=8, help="Gauss-Hermite order (default 8)")
    p.add_argument("--q", type=_q, default=None, help="space/time coupling exponent or 'auto'")
    p.add_argument("--k2", choices=("quadratic", "natural"), default="quadratic")
    p.add_argument("--bootstrap", choices=BOOTSTRAP_MODES, default="rampup")
    p.add_argument("--substeps", type=int, default=None,
                   help="startup substeps per coarse step (default: scaled with sqrt(nt))")
    p.add_argument("--param", type=_param, action="append", default=[],
                   help="problem parameter override, key=value (repeatable)")

    p = sub.add_parser("convergence", help="run a refinement study from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--csv")
    p.add_argument("--markdown")
    p.add_argument("--plot-data")

    p = sub.add_parser("stability", help="roots of the Z characteristic polynomial")
    p.add_argument("--kz", type=int, required=True)
    p.add_argument("--l", type=int, default=1)
    p.add_argument("--k2", choices=("quadratic", "natural"), default="quadratic")
    p.add_argument("--tol", type=float, default=1e-9)

    p = sub.add_parser("weights", help="exact scheme weights")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ky", type=int)
    g.add_argument("--kz", type=int)
    p.add_argument("--l", type=int, default=1, help="integration span in steps (Z weights)")
    p.add_argument("--k2", choices=("quadratic", "natural"), default="quadratic")
    return parser


def _cmd_solve(args) -> int:
    problem = make_problem(args.problem, **dict(args.param))
    cfg = SolverConfig(k_y=args.ky, k_z=args.kz, n_t=args.nt, L=args.L, q=args.q,
                       k2_variant=args.k2, bootstrap=args.bootstrap, substeps=args.substeps)
    result = solve(problem, cfg)
    out = {
        "problem": problem.name, "k_y": args.ky, "k_z": args.kz, "q": result.q, "n_t": args.nt,
        "y0": result.y0.tolist(), "z0": result.z0.tolist(), "dx": result.dx,
        "newton_iterations": result.newton_iterations, "wall_time_s": result.wall_time,
    }
    if problem.analytic is not None:
        ey, _ = result.errors(problem)
        out["err_y"] = ey
        out["err_z"] = result.z_error_mean(problem)
    print(json.dumps(out))
    return 0


def _cmd_convergence(args) -> int:
    spec = ExperimentSpec.from_json(args.config)
    report = run_experiment(spec)
    csv_path = args.csv or spec.csv
    md_path = args.markdown or spec.markdown
    plot_path = args.plot_data or spec.plot_data
    emit_report(report, csv_path, md_path, plot_path)
    print(markdown_table(report))
    for line in report.excluded:
        print(f"note: {line}", file=sys.stderr)
    failed = [c for c in report.cells if not c.ok]
    for c in failed:
        print(f"cell ({c.k_y},{c.k_z},{c.q}) n_t={c.n_t} {c.status}", file=sys.stderr)
    return 1 if failed else 0


def _cmd_stability(args) -> int:
    kind = default_kind(args.kz, args.k2)
    poly = characteristic_polynomial(args.kz, args.l, kind)
    verdict = analyze(args.kz, args.l, kind, args.tol)
    print(f"K_z={args.kz} l={args.l} coefficients: " + " ".join(f"{c:.10g}" for c in poly.coeffs))
    for r in verdict.roots:
        print(f"  root {r.real:+.5f} {r.imag:+.5f}i  |root|={abs(r):.5f}")
    print("stable" if verdict.stable else "unstable")
    return 0


def _cmd_weights(args) -> int:
    if args.ky is not None:
        w = derive_y_weights(args.ky, default_kind(args.ky, args.k2))
        print(f"K_y={w.k_y} ({w.kind.value})")
    else:
        w = derive_z_weights(args.kz, args.l, default_kind(args.kz, args.k2))
        print(f"K_z={w.k_z} l={w.l} ({w.kind.value})")
    for j, g in enumerate(w.gamma):
        print(f"gamma_{j} = {g}")
    return 0


COMMANDS = {"solve": _cmd_solve, "convergence": _cmd_convergence,
            "stability": _cmd_stability, "weights": _cmd_weights}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
