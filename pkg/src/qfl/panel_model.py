"""Panel data model, check loss and assembly of the constrained fused problem.

The estimator minimises over per-time coefficient vectors ``beta_1..beta_T``::

    sum_t sum_i loss(Y[t, i] - x_i' beta_t) + n * lam * sum_{t>=2} ||beta_t - beta_{t-1}||_2

subject to ``D beta_t <= 0`` (non-increasing) and ``C beta_t >= 0`` (convex)
for every ``t``. ``loss`` is the check function for quantile fits or
``r**2 / 2`` for the squared-loss comparator. Missing cells are left out of
the loss sum.
"""

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, build_design_rows, build_shape_matrices
from .errors import ConfigurationError, DomainError, UsageError

QUANTILE = "quantile"
SQUARED = "squared"
LOSSES = (QUANTILE, SQUARED)

NONINC = "noninc"
CONVEX = "convex"
CONSTRAINT_FLAGS = (NONINC, CONVEX)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Prices ``Y[t, i]`` on a common strike grid over ``T`` time points.

    ``prices`` holds NaN where ``mask`` is False. ``days`` keeps the original
    day labels; time index ``t`` (1-based) corresponds to ``days[t - 1]``.
    """

    strikes: np.ndarray
    prices: np.ndarray
    mask: np.ndarray = None
    days: tuple = None

    def __post_init__(self):
        strikes = _frozen(self.strikes)
        prices = np.array(self.prices, dtype=float)
        if prices.ndim != 2 or strikes.ndim != 1 or prices.shape[1] != strikes.size:
            raise UsageError(
                f"prices must be (T, n) with n = len(strikes); got {prices.shape} and {strikes.shape}"
            )
        if prices.shape[0] < 1 or strikes.size < 1:
            raise UsageError("a panel needs T >= 1 and n >= 1")
        if np.any(np.diff(strikes) <= 0):
            raise UsageError("strikes must be strictly increasing")
        mask = np.isfinite(prices) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != prices.shape:
            raise UsageError("mask shape differs from prices shape")
        if not np.all(np.isfinite(prices[mask])):
            raise UsageError("observed prices must be finite")
        prices[~mask] = np.nan
        days = tuple(range(1, prices.shape[0] + 1)) if self.days is None else tuple(int(d) for d in self.days)
        if len(days) != prices.shape[0]:
            raise UsageError("one day label per time point is required")
        object.__setattr__(self, "strikes", strikes)
        object.__setattr__(self, "prices", _frozen(prices))
        object.__setattr__(self, "mask", _frozen(mask, bool))
        object.__setattr__(self, "days", days)

    @property
    def T(self):
        return self.prices.shape[0]

    @property
    def n(self):
        return self.strikes.size

    @property
    def n_observed(self):
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class CoefficientPath:
    """Per-time coefficient vectors stacked as a ``(T, p)`` array."""

    betas: np.ndarray
    basis: BasisSpec = None

    def __post_init__(self):
        betas = np.array(self.betas, dtype=float)
        if betas.ndim == 1:
            betas = betas[None, :]
        if betas.ndim != 2 or (self.basis is not None and betas.shape[1] != self.basis.p):
            raise UsageError(f"betas must be a (T, p) stack matching the basis; got {betas.shape}")
        object.__setattr__(self, "betas", _frozen(betas))

    @property
    def T(self):
        return self.betas.shape[0]

    def differences(self):
        """``beta_t - beta_{t-1}`` for ``t = 2..T`` as a ``(T-1, p)`` array."""
        return np.diff(self.betas, axis=0)


@dataclass(frozen=True, eq=False)
class QflProblem:
    """Assembled convex program; see the module docstring for the objective."""

    design: np.ndarray
    prices: np.ndarray
    mask: np.ndarray
    tau: float
    lam: float
    loss: str = QUANTILE
    constraints: frozenset = frozenset()
    D: np.ndarray = None
    C: np.ndarray = None
    basis: BasisSpec = None
    grid: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        check_tau(self.tau)
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        unknown = set(self.constraints) - set(CONSTRAINT_FLAGS)
        if unknown:
            raise ConfigurationError(f"unknown constraint flags {sorted(unknown)}")
        design = _frozen(self.design)
        prices = np.array(self.prices, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if design.ndim != 2 or prices.ndim != 2 or prices.shape[1] != design.shape[0]:
            raise UsageError("design must be (n, p) and prices (T, n)")
        if mask.shape != prices.shape:
            raise UsageError("mask shape differs from prices shape")
        p = design.shape[1]
        D = np.zeros((0, p)) if self.D is None else np.asarray(self.D, dtype=float)
        C = np.zeros((0, p)) if self.C is None else np.asarray(self.C, dtype=float)
        if D.shape[1] != p or C.shape[1] != p:
            raise UsageError("shape matrices need p columns")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "prices", _frozen(np.where(mask, prices, 0.0)))
        object.__setattr__(self, "mask", _frozen(mask, bool))
        object.__setattr__(self, "D", _frozen(D))
        object.__setattr__(self, "C", _frozen(C))
        object.__setattr__(self, "constraints", frozenset(self.constraints))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def T(self):
        return self.prices.shape[0]

    @property
    def n(self):
        return self.design.shape[0]

    @property
    def p(self):
        return self.design.shape[1]

    @property
    def penalty_weight(self):
        """Effective multiplier ``n * lam`` of the fused group penalty."""
        return self.n * self.lam

    def with_lambda(self, lam):
        return QflProblem(
            self.design, self.prices, self.mask, self.tau, lam, self.loss,
            self.constraints, self.D, self.C, self.basis, self.grid,
        )


def check_tau(tau):
    if not (0.0 < tau < 1.0):
        raise ConfigurationError(f"tau must lie in (0, 1), got {tau!r}")


def check_loss(u, tau):
    """Quantile check function ``u * (tau - 1{u < 0})``, elementwise."""
    check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def _loss_terms(residuals, tau, loss):
    if loss == QUANTILE:
        return residuals * (tau - (residuals < 0))
    return 0.5 * residuals**2


def parse_constraints(spec):
    """Turn ``"none"``, ``"noninc"`` or ``"noninc,convex"`` (or an iterable) into a frozenset."""
    if spec is None:
        return frozenset()
    if isinstance(spec, str):
        parts = [s.strip() for s in spec.split(",") if s.strip()]
    else:
        parts = list(spec)
    parts = [s for s in parts if s != "none"]
    unknown = set(parts) - set(CONSTRAINT_FLAGS)
    if unknown:
        raise ConfigurationError(f"unknown constraint flags {sorted(unknown)}")
    return frozenset(parts)


def assemble_problem(data, basis, tau, lam, loss=QUANTILE, constraints=()):
    """Build the :class:`QflProblem` for ``data`` in ``basis``.

    Shape rows are evaluated on the observed strikes augmented with the knots
    and domain endpoints, and only for the requested flags.
    """
    constraints = parse_constraints(constraints)
    lo, hi = basis.domain
    if data.strikes[0] < lo or data.strikes[-1] > hi:
        raise DomainError(
            f"strikes [{data.strikes[0]}, {data.strikes[-1]}] exceed the basis domain [{lo}, {hi}]"
        )
    X = build_design_rows(basis, data.strikes)
    D = C = None
    if constraints:
        D_all, C_all = build_shape_matrices(basis, data.strikes)
        D = D_all if NONINC in constraints else None
        C = C_all if CONVEX in constraints else None
    return QflProblem(
        design=X, prices=data.prices, mask=data.mask, tau=tau, lam=lam, loss=loss,
        constraints=constraints, D=D, C=C, basis=basis, grid=np.asarray(data.strikes),
    )


def _betas_of(problem, path):
    betas = path.betas if isinstance(path, CoefficientPath) else np.atleast_2d(np.asarray(path, dtype=float))
    if betas.shape != (problem.T, problem.p):
        raise UsageError(f"path has shape {betas.shape}, problem expects {(problem.T, problem.p)}")
    return betas


def fitted_values(path, data_or_design):
    """``(T, n)`` matrix of fits ``phi(x_i)' beta_t``.

    Accepts a :class:`PanelDataset` (design rebuilt from the path's basis) or a
    design matrix.
    """
    if isinstance(data_or_design, PanelDataset):
        X = build_design_rows(path.basis, data_or_design.strikes)
    else:
        X = np.asarray(data_or_design, dtype=float)
    betas = path.betas if isinstance(path, CoefficientPath) else np.atleast_2d(path)
    if betas.shape[1] != X.shape[1]:
        raise UsageError("coefficient length does not match the basis size")
    return betas @ X.T


def loss_value(problem, betas):
    """Loss part of the objective (no penalty) over the observed cells."""
    betas = _betas_of(problem, betas)
    r = problem.prices - betas @ problem.design.T
    return float(np.sum(_loss_terms(r, problem.tau, problem.loss)[problem.mask]))


def objective_value(problem, path):
    """Loss plus fused penalty. Constraint feasibility is not included."""
    betas = _betas_of(problem, path)
    penalty = np.sum(np.linalg.norm(np.diff(betas, axis=0), axis=1)) if problem.T > 1 else 0.0
    return loss_value(problem, betas) + problem.penalty_weight * float(penalty)


def feasibility_report(path, problem):
    """Largest violations ``max (D b_t)_+`` and ``max (-C b_t)_+`` over all ``t``."""
    betas = _betas_of(problem, path)
    d_viol = float(np.max(betas @ problem.D.T, initial=0.0)) if problem.D.size else 0.0
    c_viol = float(np.max(-(betas @ problem.C.T), initial=0.0)) if problem.C.size else 0.0
    return max(d_viol, 0.0), max(c_viol, 0.0)
