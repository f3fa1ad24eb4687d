"""Command line front-end.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or malformed input, corrupt artifact), 3 solver did not converge
(``estimate`` still writes the artifact), 4 optimality audit failed.
Diagnostics go to stderr; data goes to files or stdout.
"""

import argparse
import json
import sys
from types import SimpleNamespace

from . import __version__
from .artifact import emit_curve, fingerprint, format_curve, load_fit, save_fit
from .chain import atomic_write, load_option_chain, synthetic_chain, write_option_chain
from .errors import ConfigurationError, DataError, DomainError, SchemaError, UsageError
from .kkt_audit import FAIL, audit
from .panel_model import QUANTILE, SQUARED, assemble_problem
from .pipeline import AUTO_DETECT, PIPELINE_SOLVER, estimate
from .prox_solver import SolverConfig
from .simulation import SIMULATION_SOLVER, ScenarioConfig, format_table, run_monte_carlo

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3
EXIT_AUDIT_FAILED = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _knots(text):
    if text == "auto":
        return text
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a knot count, got {text!r}")
    if k < 0:
        raise argparse.ArgumentTypeError("knot count must be >= 0")
    return k


def _times(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated time indices, got {text!r}")


def _sim_lambda(text):
    if text in ("detect", "estimate"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected detect, estimate or a number, got {text!r}")


def build_parser():
    parser = _Parser(prog="qfl", description="Fused quantile LASSO for option price panels.")
    parser.add_argument("--version", action="version", version=f"qfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit a price panel and write a fit artifact")
    p.add_argument("--input", required=True, help="CSV with header day,strike,price")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", default=AUTO_DETECT,
                   help="a number, auto-detect or auto-estimate (default: auto-detect)")
    p.add_argument("--basis", choices=("poly", "spline"), default="spline")
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--knots", type=_knots, default="auto", help="knot count or 'auto'")
    p.add_argument("--constraints", default="noninc,convex", help="none, noninc or noninc,convex")
    p.add_argument("--loss", choices=(QUANTILE, SQUARED), default=QUANTILE)
    p.add_argument("--refit", action=argparse.BooleanOptionalAction, default=True,
                   help="unpenalised refit within detected segments (default: on)")
    p.add_argument("--max-iters", type=int, default=PIPELINE_SOLVER.max_iters)
    p.add_argument("--eps-abs", type=float, default=PIPELINE_SOLVER.eps_abs)
    p.add_argument("--eps-rel", type=float, default=PIPELINE_SOLVER.eps_rel)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo study on synthetic panels")
    p.add_argument("--phases", choices=("two", "five"), default="two")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--dist", choices=("normal", "cauchy"), default="normal")
    p.add_argument("--loss", choices=(QUANTILE, SQUARED), default=QUANTILE)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=_sim_lambda, default="detect",
                   help="detect, estimate or a number (default: detect)")
    p.add_argument("--refit", action=argparse.BooleanOptionalAction, default=None,
                   help="default: refit in estimate mode only")
    p.add_argument("--merge", action="store_true", help="merge runs of adjacent changepoints")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("audit", help="check optimality conditions of a fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--input", required=True, help="the CSV the fit was estimated from")
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("curve", help="evaluate fitted curves on a strike grid")
    p.add_argument("--fit", required=True)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--times", type=_times, default=None, help="e.g. 1,5,21 (default: all)")
    p.add_argument("--out", default="-", help="output CSV (default: stdout)")

    p = sub.add_parser("synth", help="write the bundled SYNTHETIC 36x21 option chain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _note(msg):
    print(msg, file=sys.stderr)


def _cmd_estimate(args):
    data = load_option_chain(args.input)
    solver = SolverConfig(
        eps_abs=args.eps_abs, eps_rel=args.eps_rel, max_iters=args.max_iters,
        feas_tol=PIPELINE_SOLVER.feas_tol,
    )
    fit, _, _ = estimate(
        data, tau=args.tau, lam=args.lam, basis=args.basis, degree=args.degree, knots=args.knots,
        constraints=args.constraints, loss=args.loss, refit=args.refit, solver=solver,
    )
    save_fit(fit, args.out)
    diag = fit.diagnostics
    _note(
        f"T={data.T} n={data.n} observed={data.n_observed} lambda={fit.lam!r} ({fit.lambda_rule}) "
        f"penalty n*lambda={fit.penalty_weight!r}"
    )
    _note(f"changepoints: {list(fit.changepoints)}  segments: {[list(s) for s in fit.segments]}")
    _note(f"solver: converged={diag['converged']} iterations={diag['iterations']} objective={diag['objective']!r}")
    if fit.flagged_segments:
        _note(f"segments kept unrefitted (too few observations): {list(fit.flagged_segments)}")
    if not fit.converged:
        _note("solver did not converge; the best iterate was written")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _cmd_simulate(args):
    cfg = ScenarioConfig(
        T=args.T, n=args.n, phases=args.phases, error_dist=args.dist, loss=args.loss, tau=args.tau,
        lambda_mode=args.lam, refit=args.refit, merge=args.merge, seed=args.seed, reps=args.reps,
        solver=SIMULATION_SOLVER,
    )
    report = run_monte_carlo(cfg)
    atomic_write(args.out, report.to_json())
    sys.stdout.write(format_table([report]))
    if report.nonconverged:
        _note(f"{report.nonconverged} of {report.reps} replications hit the iteration limit")
    return EXIT_OK


def _cmd_audit(args):
    fit = load_fit(args.fit)
    if fit.loss != QUANTILE:
        _note("KKT audit inapplicable to squared-loss fits")
        return EXIT_USAGE
    data = load_option_chain(args.input)
    if fingerprint(data) != fit.fingerprint:
        raise DataError(f"{args.input} does not match the data the fit was estimated from", "mismatch")
    problem = assemble_problem(data, fit.basis, fit.tau, fit.lam, fit.loss, fit.constraints)
    sol = SimpleNamespace(
        betas=fit.betas_penalized, thetas=fit.thetas,
        primal_residual=fit.diagnostics.get("primal_residual", 0.0),
    )
    report = audit(sol, problem, tol=args.tol)
    sys.stdout.write(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    _note(f"audit: {report.status}")
    return EXIT_AUDIT_FAILED if report.status == FAIL else EXIT_OK


def _cmd_curve(args):
    fit = load_fit(args.fit)
    text = format_curve(emit_curve(fit, args.grid, args.times))
    if args.out == "-":
        sys.stdout.write(text)
    else:
        atomic_write(args.out, text)
    return EXIT_OK


def _cmd_synth(args):
    write_option_chain(synthetic_chain(args.seed), args.out)
    _note("wrote a SYNTHETIC option chain (not market data)")
    return EXIT_OK


COMMANDS = {
    "estimate": _cmd_estimate,
    "simulate": _cmd_simulate,
    "audit": _cmd_audit,
    "curve": _cmd_curve,
    "synth": _cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, DomainError) as exc:
        _note(f"qfl {args.command}: {exc}")
        return EXIT_USAGE
    except (DataError, SchemaError) as exc:
        _note(f"qfl {args.command}: {exc}")
        return EXIT_DATA
    except OSError as exc:
        _note(f"qfl {args.command}: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "))
        return EXIT_DATA
    except ValueError as exc:
        _note(f"qfl {args.command}: {exc}")
        return EXIT_USAGE


def run():
    sys.exit(main())
