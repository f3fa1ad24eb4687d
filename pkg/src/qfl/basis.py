"""Functional bases on the strike domain and the shape-constraint matrices.

Two families are supported: plain monomials ``(1, x, ..., x^d)`` and the
truncated power spline ``(1, x, ..., x^d, (x - k_1)_+^d, ..., (x - k_m)_+^d)``.
Derivatives are analytic. At a knot the right-hand limit is used, which makes
the second derivative of a quadratic spline piecewise constant and well
defined everywhere.

A basis may carry an affine rescaling ``u = (x - shift) / scale`` so that the
monomials are evaluated on ``[0, 1]`` instead of on raw dollar strikes. The
rescaled basis spans the same function space; :func:`to_raw_coefficients`
maps coefficients back to the unscaled basis for reporting.
"""

from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from .errors import ConfigurationError, DomainError

POLYNOMIAL = "polynomial"
TRUNCATED_POWER_SPLINE = "truncated_power_spline"

# relative slack when testing membership of the domain
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class BasisSpec:
    """Immutable description of a basis on the closed interval ``domain``."""

    kind: str
    degree: int
    knots: tuple
    domain: tuple
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in (POLYNOMIAL, TRUNCATED_POWER_SPLINE):
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        lo, hi = self.domain
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise ConfigurationError(f"invalid domain [{lo}, {hi}]")
        if self.degree < 0:
            raise ConfigurationError("degree must be nonnegative")
        if self.kind == POLYNOMIAL and self.knots:
            raise ConfigurationError("a polynomial basis has no knots")
        if self.kind == TRUNCATED_POWER_SPLINE and self.degree < 1:
            raise ConfigurationError("truncated power splines need degree >= 1")
        k = np.asarray(self.knots, dtype=float)
        if k.size:
            if np.any(np.diff(k) <= 0):
                raise ConfigurationError("knots must be strictly increasing")
            if k[0] <= lo or k[-1] >= hi:
                raise ConfigurationError("knots must lie strictly inside the domain")
        if not self.scale > 0:
            raise ConfigurationError("scale must be positive")

    @property
    def p(self):
        """Number of basis functions."""
        return self.degree + 1 + len(self.knots)

    @property
    def rescaled(self):
        return self.shift != 0.0 or self.scale != 1.0

    def unscaled(self):
        """The same basis without the internal rescaling."""
        return BasisSpec(self.kind, self.degree, self.knots, self.domain)

    def to_dict(self):
        return {
            "kind": self.kind,
            "degree": self.degree,
            "knots": [float(k) for k in self.knots],
            "domain": [float(self.domain[0]), float(self.domain[1])],
            "shift": float(self.shift),
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            degree=int(d["degree"]),
            knots=tuple(float(k) for k in d["knots"]),
            domain=(float(d["domain"][0]), float(d["domain"][1])),
            shift=float(d.get("shift", 0.0)),
            scale=float(d.get("scale", 1.0)),
        )


def _domain(domain):
    try:
        lo, hi = (float(v) for v in domain)
    except (TypeError, ValueError):
        raise ConfigurationError(f"domain must be a pair (lo, hi), got {domain!r}")
    if not lo < hi:
        raise ConfigurationError(f"invalid domain [{lo}, {hi}]: need lo < hi")
    return lo, hi


def make_polynomial_basis(degree, domain, rescale=False):
    """Monomial basis ``x^l, l = 0..degree`` on ``domain``.

    With ``rescale=True`` the monomials are taken in ``(x - lo) / (hi - lo)``.
    """
    lo, hi = _domain(domain)
    if int(degree) != degree or degree < 0:
        raise ConfigurationError(f"degree must be a nonnegative integer, got {degree!r}")
    shift, scale = (lo, hi - lo) if rescale else (0.0, 1.0)
    return BasisSpec(POLYNOMIAL, int(degree), (), (lo, hi), shift, scale)


def make_truncated_spline_basis(degree, knots, domain, rescale=False):
    """Truncated power spline of the given degree with inner ``knots``."""
    lo, hi = _domain(domain)
    if int(degree) != degree or degree < 1:
        raise ConfigurationError(f"spline degree must be an integer >= 1, got {degree!r}")
    knots = tuple(float(k) for k in knots)
    if any(b <= a for a, b in zip(knots, knots[1:])):
        raise ConfigurationError(f"knots must be strictly increasing: {knots}")
    if knots and (knots[0] <= lo or knots[-1] >= hi):
        raise ConfigurationError(f"knots must lie strictly inside ({lo}, {hi}): {knots}")
    shift, scale = (lo, hi - lo) if rescale else (0.0, 1.0)
    return BasisSpec(TRUNCATED_POWER_SPLINE, int(degree), knots, (lo, hi), shift, scale)


def choose_knots(strikes, count):
    """Inner knots at the empirical quantiles ``j / (count + 1)`` of the distinct strikes.

    The number of knots is capped at ``#distinct - 2`` so that every knot
    sits strictly between the smallest and largest strike; coinciding
    quantiles are collapsed.
    """
    if int(count) != count or count < 0:
        raise ConfigurationError(f"knot count must be a nonnegative integer, got {count!r}")
    values = np.unique(np.asarray(strikes, dtype=float))
    if values.size < 2 or not np.all(np.isfinite(values)):
        raise ConfigurationError("need at least two distinct finite strikes to place knots")
    count = min(int(count), values.size - 2)
    if count == 0:
        return []
    probs = np.arange(1, count + 1) / (count + 1)
    q = np.quantile(values, probs)
    q = q[(q > values[0]) & (q < values[-1])]
    return [float(v) for v in np.unique(q)]


def default_knot_count(strikes):
    """``min(8, #distinct strikes // 4)``."""
    return min(8, np.unique(np.asarray(strikes, dtype=float)).size // 4)


def _check_in_domain(basis, x):
    lo, hi = basis.domain
    slack = _DOMAIN_SLACK * (hi - lo)
    bad = (x < lo - slack) | (x > hi + slack) | ~np.isfinite(x)
    if np.any(bad):
        raise DomainError(f"x = {x[bad][0]!r} lies outside the basis domain [{lo}, {hi}]")


def _power_derivative(u, power, order):
    """``d^order/du^order u^power`` for integer powers, with ``0^0 = 1``."""
    if order > power:
        return np.zeros_like(u)
    coef = factorial(power) // factorial(power - order)
    return coef * u ** (power - order)


def _truncated_derivative(u, knot, degree, order):
    """Right-limit derivative of ``(u - knot)_+^degree``."""
    if order > degree:
        return np.zeros_like(u)
    coef = factorial(degree) // factorial(degree - order)
    on = u >= knot
    if order == degree:
        return np.where(on, float(coef), 0.0)
    return np.where(on, coef * np.maximum(u - knot, 0.0) ** (degree - order), 0.0)


def basis_matrix(basis, x, order=0):
    """Evaluate all basis functions (or their derivatives) at every point of ``x``.

    Returns an array of shape ``(len(x), p)``.
    """
    if order not in (0, 1, 2):
        raise ConfigurationError(f"derivative order must be 0, 1 or 2, got {order!r}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_in_domain(basis, x)
    u = (x - basis.shift) / basis.scale
    cols = [_power_derivative(u, ell, order) for ell in range(basis.degree + 1)]
    for k in basis.knots:
        kappa = (k - basis.shift) / basis.scale
        cols.append(_truncated_derivative(u, kappa, basis.degree, order))
    out = np.column_stack(cols) if cols else np.empty((x.size, 0))
    if order:
        out = out / basis.scale**order
    return out


def eval_basis(basis, x, order=0):
    """Vector ``(phi_j^(order)(x))_j`` of length ``p`` at a single point."""
    return basis_matrix(basis, [x], order)[0]


def build_design_rows(basis, strikes):
    """Design matrix with row ``i`` equal to ``eval_basis(basis, strikes[i])``."""
    return basis_matrix(basis, strikes, 0)


def constraint_grid(basis, grid):
    """Sorted union of ``grid``, the knots and both domain endpoints.

    For bases of degree at most two the first derivative is piecewise linear
    and the second piecewise constant between these points, so checking the
    constraints there certifies the shape on the whole domain.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ConfigurationError("constraint grid is empty")
    _check_in_domain(basis, grid)
    lo, hi = basis.domain
    pts = np.concatenate([grid, np.asarray(basis.knots, dtype=float), [lo, hi]])
    return np.unique(np.clip(pts, lo, hi))


def build_shape_matrices(basis, grid):
    """Monotonicity matrix ``D`` (first derivatives) and convexity matrix ``C``.

    Rows are evaluated on :func:`constraint_grid` ``(basis, grid)``. A
    coefficient vector ``b`` gives a non-increasing curve when ``D @ b <= 0``
    and a convex one when ``C @ b >= 0``.
    """
    pts = constraint_grid(basis, grid)
    return basis_matrix(basis, pts, 1), basis_matrix(basis, pts, 2)


def to_raw_coefficients(basis, beta):
    """Coefficients of the same curve in ``basis.unscaled()``.

    Works on a single vector or on a ``(T, p)`` stack.
    """
    beta = np.asarray(beta, dtype=float)
    if not basis.rescaled:
        return beta.copy()
    a, s, d = basis.shift, basis.scale, basis.degree
    p = basis.p
    # phi_scaled = M @ phi_raw
    M = np.zeros((p, p))
    for ell in range(d + 1):
        for k in range(ell + 1):
            M[ell, k] = comb(ell, k) * (-a) ** (ell - k) / s**ell
    for j in range(len(basis.knots)):
        M[d + 1 + j, d + 1 + j] = 1.0 / s**d
    return beta @ M
