"""Changepoint sets, segments, the default tuning rule and post-selection refits."""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse
from scipy.optimize import linprog

from .errors import ConfigurationError, UsageError
from .panel_model import QUANTILE, QflProblem
from .prox_solver import SolverConfig, solve

DETECT = "detect"
ESTIMATE = "estimate"


@dataclass(frozen=True, eq=False)
class Segmentation:
    """Changepoints ``2 <= t_1 < ... <= T`` and the segments they induce.

    ``coefficients`` holds one vector per segment when available;
    ``flagged`` lists segment indices whose refit was skipped.
    """

    T: int
    changepoints: tuple = ()
    coefficients: np.ndarray = None
    flagged: tuple = ()

    def __post_init__(self):
        cps = tuple(sorted(int(c) for c in set(self.changepoints)))
        if self.T < 1:
            raise UsageError("T must be at least 1")
        if cps and (cps[0] < 2 or cps[-1] > self.T):
            raise UsageError(f"changepoints must lie in 2..{self.T}, got {cps}")
        object.__setattr__(self, "changepoints", cps)
        if self.coefficients is not None:
            coef = np.array(self.coefficients, dtype=float)
            if coef.ndim != 2 or coef.shape[0] != len(cps) + 1:
                raise UsageError("need one coefficient vector per segment")
            coef.setflags(write=False)
            object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "flagged", tuple(self.flagged))

    @property
    def segments(self):
        """Inclusive 1-based ``(start, end)`` pairs covering ``1..T``."""
        starts = (1,) + self.changepoints
        ends = tuple(c - 1 for c in self.changepoints) + (self.T,)
        return list(zip(starts, ends))

    def betas(self):
        """Expand per-segment coefficients to a ``(T, p)`` path."""
        if self.coefficients is None:
            raise UsageError("segmentation carries no coefficients")
        lengths = [e - s + 1 for s, e in self.segments]
        return np.repeat(self.coefficients, lengths, axis=0)


def extract_changepoints(sol):
    """Times whose fusion block is exactly nonzero, with segment coefficients from ``sol``."""
    T = sol.betas.shape[0]
    cps = sol.active_set()
    starts = [1] + cps
    return Segmentation(T, cps, np.array([sol.betas[s - 1] for s in starts]))


def merge_adjacent(seg, thetas):
    """Collapse runs of consecutive changepoints to the one with the largest jump."""
    if not seg.changepoints:
        return seg
    norms = np.linalg.norm(np.asarray(thetas), axis=1)
    kept, run = [], [seg.changepoints[0]]
    for c in seg.changepoints[1:]:
        if c == run[-1] + 1:
            run.append(c)
            continue
        kept.append(max(run, key=lambda t: norms[t - 2]))
        run = [c]
    kept.append(max(run, key=lambda t: norms[t - 2]))
    return Segmentation(seg.T, kept)


def lambda_default(n, T=None, mode=DETECT):
    """Default tuning parameter.

    ``detect``: ``(log n)^(5/2) / n`` (large, guards against spurious changes);
    ``estimate``: ``(log n)^(1/2) / n`` (smaller, less shrinkage). The rule
    depends on ``n`` only; ``T`` is validated when given.
    """
    if int(n) != n or n < 2:
        raise ConfigurationError(f"lambda_default needs an integer n >= 2, got {n!r}")
    if T is not None and T < 1:
        raise ConfigurationError("T must be positive")
    log_n = math.log(n)
    if mode == DETECT:
        return log_n**2.5 / n
    if mode == ESTIMATE:
        return log_n**0.5 / n
    raise ConfigurationError(f"unknown lambda mode {mode!r}")


def _pooled_problem(template, data_prices, data_mask, start, end):
    rows = slice(start - 1, end)
    mask = data_mask[rows]
    X = np.vstack([template.design[m] for m in mask])
    y = data_prices[rows][mask]
    return QflProblem(
        design=X, prices=y[None, :], mask=np.ones((1, y.size), bool), tau=template.tau, lam=0.0,
        loss=template.loss, constraints=template.constraints, D=template.D, C=template.C,
        basis=template.basis,
    )


def _quantile_lp(problem):
    """Pooled unpenalised quantile fit as a linear program in ``(beta, u+, u-)``."""
    X, y, tau = problem.design, problem.prices[0], problem.tau
    m, p = X.shape
    eye = scipy.sparse.identity(m, format="csr")
    A_eq = scipy.sparse.hstack([scipy.sparse.csr_matrix(X), eye, -eye], format="csr")
    cost = np.concatenate([np.zeros(p), np.full(m, tau), np.full(m, 1.0 - tau)])
    shape = np.vstack([problem.D, -problem.C])
    A_ub = np.hstack([shape, np.zeros((shape.shape[0], 2 * m))]) if shape.size else None
    b_ub = np.zeros(shape.shape[0]) if shape.size else None
    bounds = [(None, None)] * p + [(0, None)] * (2 * m)
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        return None
    return res.x[:p]


def _pooled_fit(problem, config):
    if problem.loss == QUANTILE:
        beta = _quantile_lp(problem)
        if beta is not None:
            return beta
    elif not problem.constraints:
        return np.linalg.lstsq(problem.design, problem.prices[0], rcond=None)[0]
    return solve(problem, config or SolverConfig()).betas[0]


def refit_segments(data, seg, template, config=None):
    """Unpenalised fit per segment, pooling the segment's observations.

    ``template`` supplies the design, loss, quantile level and shape rows.
    Segments with fewer observations than coefficients keep the incoming
    coefficients and are listed in ``flagged``. Quantile refits are solved
    exactly as linear programs; ``config`` is used for the iterative solver
    when one is needed (shape-constrained squared loss).
    """
    prices = np.asarray(data.prices if hasattr(data, "prices") else data)
    mask = np.asarray(data.mask) if hasattr(data, "mask") else np.isfinite(prices)
    if prices.shape[0] != seg.T:
        raise UsageError("segmentation and data disagree on T")
    prices = np.where(mask, prices, 0.0)
    coefs, flagged = [], []
    for k, (s, e) in enumerate(seg.segments):
        n_obs = int(mask[s - 1:e].sum())
        if n_obs < template.p:
            if seg.coefficients is None:
                raise UsageError(f"segment [{s}, {e}] has {n_obs} observations and no fallback")
            coefs.append(seg.coefficients[k])
            flagged.append(k)
            continue
        coefs.append(_pooled_fit(_pooled_problem(template, prices, mask, s, e), config))
    return Segmentation(seg.T, seg.changepoints, np.array(coefs), tuple(flagged))


class Recovery(NamedTuple):
    discovered: float
    count_ratio: float
    truth_empty: bool = False


def recovery_metrics(est, truth, window=0):
    """Share of true changepoints found and ratio of detected to true counts.

    A true changepoint counts as found when some estimate lies within
    ``window`` of it (exact match by default). With an empty truth the ratio
    is the raw number of detections and ``truth_empty`` is set.
    """
    est = set(est.changepoints if isinstance(est, Segmentation) else est)
    truth = set(truth.changepoints if isinstance(truth, Segmentation) else truth)
    if not truth:
        return Recovery(1.0, float(len(est)), True)
    hits = sum(1 for c in truth if any(abs(e - c) <= window for e in est))
    return Recovery(hits / len(truth), len(est) / len(truth))
