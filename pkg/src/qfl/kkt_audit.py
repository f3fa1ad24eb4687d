"""First-order optimality audit for unconstrained fused quantile fits.

For each time ``t`` let::

    G_t = tau * sum_{k>=t} sum_i x_i  -  sum_{k>=t} sum_i x_i 1{Y_ik <= x_i' b_k}

(sums over observed cells). At an optimum ``G_t`` equals
``n lam theta_t / ||theta_t||`` wherever the fusion block ``theta_t`` is
nonzero, and ``||G_t|| <= n lam`` for every ``t``.

Solvers stop on or next to the kinks of the check function, where the
indicator is ambiguous. Cells with ``|Y - fit| <= tie_tol`` (by default
the solver's own primal accuracy) are therefore treated as ties whose
indicator may take any value in ``[0, 1]``; the conditions are tested for
the best such choice (a bounded least-squares problem), alongside the plain
``<=`` and ``<`` conventions.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear

from .errors import UsageError
from .panel_model import QUANTILE

PASS = "pass"
FAIL = "fail"
ADVISORY = "advisory"
INAPPLICABLE = "inapplicable"


@dataclass(frozen=True)
class KktReport:
    status: str
    tolerance: float
    penalty_weight: float
    active_times: tuple = ()
    active_residuals: tuple = ()
    active_residuals_weak: tuple = ()
    active_residuals_strict: tuple = ()
    inactive_margins: tuple = ()
    inactive_margins_weak: tuple = ()
    inactive_margins_strict: tuple = ()
    constraints_active: bool = False
    message: str = ""

    @property
    def passed(self):
        return self.status == PASS

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        out["passed"] = self.passed
        return out


def default_tie_tol(sol, problem):
    """``1e-6`` relative to the price level, widened to the solver's primal accuracy.

    The solver reports its primal residual in units of prices divided by
    their mean absolute value, so it is scaled back here.
    """
    y = problem.prices[problem.mask]
    level = max(1.0, float(np.mean(np.abs(y)))) if y.size else 1.0
    primal = float(getattr(sol, "primal_residual", 0.0) or 0.0)
    return max(1e-6, primal) * level


class _Sums:
    """Precomputed pieces of ``G_t`` for one solution."""

    def __init__(self, sol, problem, tie_tol):
        if problem.loss != QUANTILE:
            raise UsageError("KKT audit inapplicable: the conditions are stated for the quantile loss only")
        X, mask, tau = problem.design, problem.mask, problem.tau
        B = np.asarray(sol.betas)
        if B.shape != (problem.T, problem.p):
            raise UsageError("solution and problem shapes differ")
        fit = B @ X.T
        resid = np.where(mask, problem.prices - fit, np.nan)
        if tie_tol is None:
            tie_tol = default_tie_tol(sol, problem)
        self.ties = mask & (np.abs(resid) <= tie_tol)
        weak = mask & (resid <= 0)          # Y <= fit
        strict = mask & (resid < 0)
        # per-time contributions, then suffix sums over k >= t
        base = tau * (mask.astype(float) @ X)
        self.weak = self._suffix(base - weak.astype(float) @ X)
        self.strict = self._suffix(base - strict.astype(float) @ X)
        self.untied = self._suffix(base - (strict & ~self.ties).astype(float) @ X)
        self.X = X
        self.thetas = np.asarray(sol.thetas)
        self.weight = problem.penalty_weight
        self.T = problem.T

    @staticmethod
    def _suffix(per_time):
        return np.cumsum(per_time[::-1], axis=0)[::-1]

    def tie_columns(self, t):
        """Columns ``x_i`` of every tied cell with time ``k >= t`` (0-based ``t``)."""
        ks, iis = np.nonzero(self.ties[t:])
        return self.X[iis].T

    def resolved_distance(self, t, target):
        """``min_w || untied_t - G w - target ||`` over ``w`` in ``[0, 1]``."""
        base = self.untied[t] - target
        G = self.tie_columns(t)
        if G.shape[1] == 0:
            return float(np.linalg.norm(base))
        res = lsq_linear(G, base, bounds=(0.0, 1.0), method="bvls")
        return float(np.linalg.norm(base - G @ res.x))


def _direction(sums, t):
    if t < 2 or t > sums.T:
        raise UsageError(f"changepoint times lie in 2..{sums.T}, got {t}")
    theta = sums.thetas[t - 2]
    norm = np.linalg.norm(theta)
    if norm == 0.0:
        raise UsageError(f"t = {t} is not an active changepoint")
    return theta / norm


def kkt_active(sol, problem, t, tie_tol=None, convention="resolved"):
    """Residual of the equality condition at active changepoint ``t`` (1-based)."""
    sums = _Sums(sol, problem, tie_tol)
    target = sums.weight * _direction(sums, t)
    if convention == "weak":
        return float(np.linalg.norm(sums.weak[t - 1] - target))
    if convention == "strict":
        return float(np.linalg.norm(sums.strict[t - 1] - target))
    return sums.resolved_distance(t - 1, target)


def kkt_inactive(sol, problem, t, tie_tol=None, convention="resolved"):
    """Margin ``n lam - ||G_t||`` at time ``t`` (1-based); nonnegative when satisfied."""
    sums = _Sums(sol, problem, tie_tol)
    if not 1 <= t <= sums.T:
        raise UsageError(f"t must lie in 1..{sums.T}")
    if convention == "weak":
        return sums.weight - float(np.linalg.norm(sums.weak[t - 1]))
    if convention == "strict":
        return sums.weight - float(np.linalg.norm(sums.strict[t - 1]))
    return sums.weight - sums.resolved_distance(t - 1, np.zeros(problem.p))


def _constraints_binding(sol, problem, bind_tol):
    """Whether some unit-normalised shape row is within ``bind_tol`` of zero (relative to ``||b_t||``)."""
    B = np.asarray(sol.betas)
    size = np.maximum(1.0, np.linalg.norm(B, axis=1))[:, None]
    for M in (problem.D, problem.C):
        norms = np.linalg.norm(M, axis=1) if M.size else np.zeros(0)
        if not np.any(norms > 0):
            continue
        U = M[norms > 0] / norms[norms > 0, None]
        if np.any(np.abs(B @ U.T) <= bind_tol * size):
            return True
    return False


def audit(sol, problem, tol=1e-3, tie_tol=None, bind_tol=1e-8):
    """Run both conditions for every applicable time and aggregate them.

    Passes when every active residual is at most ``tol * max(1, n lam)`` and
    every margin is at least ``-tol * max(1, n lam)``. If a shape constraint
    is binding the conditions no longer describe the optimum: the residuals
    are still reported but the status is ``advisory`` either way.
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    if problem.loss != QUANTILE:
        return KktReport(
            status=INAPPLICABLE, tolerance=tol, penalty_weight=problem.penalty_weight,
            message="KKT audit inapplicable: the conditions are stated for the quantile loss only",
        )
    sums = _Sums(sol, problem, tie_tol)
    weight = sums.weight
    active = tuple(t + 2 for t in range(sums.T - 1) if np.any(sums.thetas[t] != 0.0))
    act, act_w, act_s = [], [], []
    for t in active:
        target = weight * _direction(sums, t)
        act.append(sums.resolved_distance(t - 1, target))
        act_w.append(float(np.linalg.norm(sums.weak[t - 1] - target)))
        act_s.append(float(np.linalg.norm(sums.strict[t - 1] - target)))
    zero = np.zeros(problem.p)
    ina = [weight - sums.resolved_distance(t, zero) for t in range(sums.T)]
    ina_w = [weight - float(np.linalg.norm(sums.weak[t])) for t in range(sums.T)]
    ina_s = [weight - float(np.linalg.norm(sums.strict[t])) for t in range(sums.T)]

    bound = tol * max(1.0, weight)
    ok = all(r <= bound for r in act) and all(m >= -bound for m in ina)
    binding = _constraints_binding(sol, problem, bind_tol) if problem.constraints else False
    if binding:
        status = ADVISORY
    else:
        status = PASS if ok else FAIL
    return KktReport(
        status=status, tolerance=tol, penalty_weight=weight, active_times=active,
        active_residuals=tuple(act), active_residuals_weak=tuple(act_w),
        active_residuals_strict=tuple(act_s), inactive_margins=tuple(ina),
        inactive_margins_weak=tuple(ina_w), inactive_margins_strict=tuple(ina_s),
        constraints_active=binding,
    )
