"""End-to-end estimation: basis, penalised fit, changepoints, refit, artifact."""

import numpy as np

from .artifact import FitArtifact, fingerprint
from .basis import (
    choose_knots,
    default_knot_count,
    make_polynomial_basis,
    make_truncated_spline_basis,
)
from .changepoint import DETECT, ESTIMATE, extract_changepoints, lambda_default, refit_segments
from .errors import ConfigurationError, DataError
from .panel_model import QUANTILE, assemble_problem, feasibility_report, parse_constraints
from .prox_solver import SolverConfig, solve

AUTO_DETECT = "auto-detect"
AUTO_ESTIMATE = "auto-estimate"

# Shape-constrained check-loss fits are LP-like and the splitting method
# approaches them slowly; this tolerance converges on chain-sized problems
# with the exact changepoint set and objective within ~1e-5 relative.
PIPELINE_SOLVER = SolverConfig(eps_abs=1e-7, eps_rel=1e-5, feas_tol=1e-7, max_iters=50000)


def build_basis(strikes, kind="spline", degree=2, knots="auto"):
    """Rescaled basis on ``[min strike, max strike]``.

    ``knots`` is ``"auto"`` (``min(8, #strikes // 4)`` quantile knots), a
    knot count, or an explicit sequence of knot locations.
    """
    strikes = np.asarray(strikes, dtype=float)
    if np.unique(strikes).size < 2:
        raise DataError("need at least two distinct strikes", "size")
    domain = (float(strikes.min()), float(strikes.max()))
    if kind in ("poly", "polynomial"):
        return make_polynomial_basis(degree, domain, rescale=True)
    if kind not in ("spline", "truncated_power_spline"):
        raise ConfigurationError(f"unknown basis {kind!r}; use 'poly' or 'spline'")
    if knots == "auto":
        locs = choose_knots(strikes, default_knot_count(strikes))
    elif isinstance(knots, (int, np.integer)):
        locs = choose_knots(strikes, int(knots))
    else:
        locs = [float(k) for k in knots]
    return make_truncated_spline_basis(degree, locs, domain, rescale=True)


def resolve_lambda(lam, data):
    """``(lambda, rule)``; the automatic rules use ``n`` = number of observed cells."""
    if lam == AUTO_DETECT:
        return lambda_default(data.n_observed, data.T, DETECT), AUTO_DETECT
    if lam == AUTO_ESTIMATE:
        return lambda_default(data.n_observed, data.T, ESTIMATE), AUTO_ESTIMATE
    try:
        value = float(lam)
    except (TypeError, ValueError):
        raise ConfigurationError(f"lambda must be a number, auto-detect or auto-estimate; got {lam!r}") from None
    if not (value >= 0 and np.isfinite(value)):
        raise ConfigurationError(f"lambda must be finite and >= 0, got {lam!r}")
    return value, "explicit"


def estimate(data, tau=0.5, lam=AUTO_DETECT, basis="spline", degree=2, knots="auto",
             constraints="noninc,convex", loss=QUANTILE, refit=True, solver=None):
    """Fit the panel and return ``(FitArtifact, problem, solution)``."""
    spec = build_basis(data.strikes, basis, degree, knots)
    lam_value, rule = resolve_lambda(lam, data)
    problem = assemble_problem(data, spec, tau, lam_value, loss, parse_constraints(constraints))
    solver = solver or PIPELINE_SOLVER
    sol = solve(problem, solver)
    seg = extract_changepoints(sol)
    betas = sol.betas
    flagged = ()
    if refit:
        seg = refit_segments(data, seg, problem, solver)
        betas = seg.betas()
        flagged = seg.flagged
    d_viol, c_viol = feasibility_report(betas, problem)
    fit = FitArtifact(
        basis=spec,
        days=data.days,
        fingerprint=fingerprint(data),
        tau=problem.tau,
        lam=problem.lam,
        lambda_rule=rule,
        penalty_weight=problem.penalty_weight,
        loss=loss,
        constraints=tuple(sorted(problem.constraints)),
        refit=bool(refit),
        betas=betas,
        betas_penalized=sol.betas,
        thetas=sol.thetas,
        changepoints=seg.changepoints,
        segments=tuple(seg.segments),
        flagged_segments=flagged,
        diagnostics={
            "converged": bool(sol.converged),
            "iterations": int(sol.iterations),
            "primal_residual": float(sol.primal_residual),
            "dual_residual": float(sol.dual_residual),
            "objective": float(sol.objective),
        },
        feasibility={"noninc": d_viol, "convex": c_viol},
    )
    return fit, problem, sol
