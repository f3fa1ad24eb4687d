"""Operator-splitting (ADMM) solver for the fused quantile problem.

The coefficients ``B`` (``T x p``) are tied to four blocks of auxiliary
variables through ``z = A vec(B)``:

* fitted values ``x_i' beta_t`` for every observed cell (prox of the loss),
* fusion differences ``beta_t - beta_{t-1}`` (block soft-threshold),
* ``D beta_t`` (projection onto the nonpositive orthant),
* ``C beta_t`` (projection onto the nonnegative orthant).

The ``B`` update solves ``(A'A + eps I) vec(B) = A'(z - u)``. That system
does not depend on the splitting penalty, so it is factorised once. Prices
are divided by a data scale ``s`` before iterating and the coefficients are
multiplied back afterwards: for the check loss the problem in ``Y / s`` has
the same ``lam``, for the squared loss it has ``lam / s``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .panel_model import (
    QUANTILE,
    CoefficientPath,
    feasibility_report,
    objective_value,
)


@dataclass(frozen=True)
class SolverConfig:
    """Tuning knobs for :func:`solve`.

    ``rho`` is the splitting penalty in units of the normalised prices.
    ``feas_tol`` is an extra stopping requirement on the shape constraints so
    that returned paths are feasible to well below ``1e-6``.
    """

    rho: float = 1.0
    max_iters: int = 20000
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    over_relaxation: float = 1.6
    adaptive_rho: bool = False
    check_every: int = 10
    history_every: int = 100
    feas_tol: float = 1e-8
    dense_limit: int = 2000

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not 1.0 <= self.over_relaxation <= 1.9:
            raise ValueError("over_relaxation must lie in [1, 1.9]")
        if self.max_iters < 1 or self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("max_iters, eps_abs and eps_rel must be positive")


@dataclass(frozen=True, eq=False)
class QflSolution:
    path: CoefficientPath
    thetas: np.ndarray
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    converged: bool
    history: tuple = field(default=(), repr=False)

    @property
    def betas(self):
        return self.path.betas

    def active_set(self):
        """1-based times ``t`` whose fusion block is not exactly zero."""
        return [t + 2 for t in range(self.thetas.shape[0]) if np.any(self.thetas[t] != 0.0)]


def prox_check(v, tau, sigma):
    """Elementwise ``argmin_u sigma * rho_tau(u) + (u - v)^2 / 2``."""
    v = np.asarray(v, dtype=float)
    return v - np.clip(v, -sigma * (1.0 - tau), sigma * tau)


def prox_group_l2(v, kappa):
    """Block soft-threshold: ``0`` if ``||v|| <= kappa`` else ``(1 - kappa/||v||) v``."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm <= kappa:
        return np.zeros_like(v)
    return (1.0 - kappa / norm) * v


def _prox_group_rows(V, kappa):
    norms = np.sqrt(np.einsum("ij,ij->i", V, V))
    shrink = np.zeros_like(norms)
    big = norms > kappa
    shrink[big] = 1.0 - kappa / norms[big]
    return shrink[:, None] * V


def project_orthant(v, sense):
    """Project onto ``{v <= 0}`` (``"nonpositive"``) or ``{v >= 0}`` (``"nonnegative"``)."""
    v = np.asarray(v, dtype=float)
    if sense == "nonpositive":
        return np.minimum(v, 0.0)
    if sense == "nonnegative":
        return np.maximum(v, 0.0)
    raise ValueError(f"unknown orthant {sense!r}")


def _row_normalised(M):
    if M.size == 0:
        return M
    norms = np.linalg.norm(M, axis=1)
    keep = norms > 0
    return M[keep] / norms[keep, None]


class _Operator:
    """The stacked sparse map ``A`` and a cached solver for ``(A'A + eps I) x = b``.

    Rows are ordered: observed cells (row-major in ``(t, i)``), fusion
    differences, ``D`` rows per time, ``C`` rows per time. Column ``t * p + j``
    holds coefficient ``j`` of time ``t``.
    """

    def __init__(self, problem, dense_limit, lam):
        X, mask = problem.design, problem.mask
        T, p = problem.T, problem.p
        self.T, self.p = T, p
        self.D = _row_normalised(problem.D)
        self.C = _row_normalised(problem.C)
        n_obs = np.maximum(mask.sum(axis=1), 1)
        # block weights keep the fusion and shape rows on the scale of the
        # per-time Gram matrix; a weak penalty gets lighter fusion rows, which
        # otherwise stall the iteration for lam below about 1e-2
        self.w_diff = float(np.sqrt(np.mean(n_obs))) * float(np.clip(np.sqrt(lam / 0.2), 0.03, 1.0))
        self.w_shape = float(np.sqrt(np.mean(n_obs) / max(len(self.D) + len(self.C), 1)))

        fit = scipy.sparse.block_diag([X[mask[t]] for t in range(T)], format="csr")
        blocks = [fit]
        # with no penalty the fusion rows only add inertia to the B update
        self.fused = T > 1 and problem.penalty_weight > 0
        if self.fused:
            diff = scipy.sparse.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1], shape=(T - 1, T))
            blocks.append(self.w_diff * scipy.sparse.kron(diff, scipy.sparse.identity(p)))
        eye_T = scipy.sparse.identity(T)
        if len(self.D):
            blocks.append(self.w_shape * scipy.sparse.kron(eye_T, self.D))
        if len(self.C):
            blocks.append(self.w_shape * scipy.sparse.kron(eye_T, self.C))
        A = scipy.sparse.vstack(blocks, format="csr")
        sizes = [b.shape[0] for b in blocks]
        if not self.fused:
            sizes.insert(1, 0)
        if not len(self.D):
            sizes.insert(2, 0)
        if not len(self.C):
            sizes.append(0)
        edges = np.cumsum([0] + sizes)
        self.slices = [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]
        self.m = A.shape[0]

        self.A = A
        self.AT = A.T.tocsr()
        self._blocks_T = [A[sl].T.tocsr() for sl in self.slices]
        M = (self.AT @ A).tocsc()
        eps = 1e-10 * max(M.diagonal().sum(), 1.0)
        M = M + eps * scipy.sparse.identity(T * p, format="csc")
        if T * p <= dense_limit:
            # A is sparse but (A'A)^{-1} is small and dense: two cheap products per update
            cho = scipy.linalg.cho_factor(M.toarray(), check_finite=False)
            self.Minv = scipy.linalg.cho_solve(cho, np.eye(T * p), check_finite=False)
            self._lu = None
        else:
            self.Minv = None
            self._lu = scipy.sparse.linalg.splu(M)

    def update(self, q):
        if self.Minv is not None:
            return self.Minv @ (self.AT @ q)
        return self._lu.solve(self.AT @ q)

    def block_adjoint_norms(self, w):
        return [float(np.linalg.norm(B @ w[sl])) for B, sl in zip(self._blocks_T, self.slices)]


def _data_scale(problem):
    y = problem.prices[problem.mask]
    s = float(np.mean(np.abs(y))) if y.size else 0.0
    return s if s > 0 and np.isfinite(s) else 1.0


def _segment_average(B, thetas):
    """Replace ``beta_t`` by its segment mean where fusion blocks are exactly zero."""
    out = B.copy()
    start = 0
    T = B.shape[0]
    for t in range(1, T + 1):
        if t == T or np.any(thetas[t - 1] != 0.0):
            if t - start > 1:
                out[start:t] = B[start:t].mean(axis=0)
            start = t
    return out


def solve(problem, config=None):
    """Minimise the fused problem; never raises on slow convergence.

    If ``max_iters`` is exhausted the best checked iterate is returned with
    ``converged=False``.
    """
    cfg = config or SolverConfig()
    scale = _data_scale(problem)
    op = _Operator(problem, cfg.dense_limit, problem.lam if problem.loss == QUANTILE else problem.lam / scale)
    T, p = problem.T, problem.p
    y = problem.prices[problem.mask] / scale
    # check loss is homogeneous of degree one in (Y, beta); squared loss of degree two
    weight = problem.penalty_weight if problem.loss == QUANTILE else problem.penalty_weight / scale
    tau = problem.tau
    quantile = problem.loss == QUANTILE
    rho = cfg.rho
    alpha = cfg.over_relaxation
    f_sl, d_sl, dd_sl, cc_sl = op.slices
    kappa = weight / op.w_diff

    beta = np.zeros(T * p)
    z = np.zeros(op.m)
    u = np.zeros(op.m)
    history = []
    best = None
    r_norm = s_norm = np.inf
    converged = False
    it = 0

    for it in range(1, cfg.max_iters + 1):
        beta = op.update(z - u)
        Ab = op.A @ beta
        v = alpha * Ab + (1.0 - alpha) * z + u
        z_old = z
        z = np.empty_like(v)
        if quantile:
            # y - prox_check(y - v) written without the intermediate residual
            vf = v[f_sl]
            z[f_sl] = vf + np.clip(y - vf, -(1.0 - tau) / rho, tau / rho)
        else:
            z[f_sl] = (y + rho * v[f_sl]) / (1.0 + rho)
        if op.fused:
            z[d_sl] = _prox_group_rows(v[d_sl].reshape(T - 1, p), kappa / rho).ravel()
        z[dd_sl] = np.minimum(v[dd_sl], 0.0)
        z[cc_sl] = np.maximum(v[cc_sl], 0.0)
        u = v - z

        if it % cfg.history_every == 0:
            history.append(objective_value(problem, beta.reshape(T, p) * scale))

        if it % cfg.check_every and it != cfg.max_iters:
            continue
        r_norm = float(np.linalg.norm(Ab - z))
        s_norm = rho * float(np.linalg.norm(op.AT @ (z - z_old)))
        eps_pri = np.sqrt(op.m) * cfg.eps_abs + cfg.eps_rel * max(np.linalg.norm(Ab), np.linalg.norm(z))
        # A'u itself vanishes at the optimum, so the relative part uses the
        # largest per-block term
        eps_dual = np.sqrt(T * p) * cfg.eps_abs + cfg.eps_rel * rho * max(op.block_adjoint_norms(u))
        B = beta.reshape(T, p)
        viol = max(
            float(np.max(B @ op.D.T, initial=0.0)) if op.D.size else 0.0,
            float(np.max(-(B @ op.C.T), initial=0.0)) if op.C.size else 0.0,
        )
        score = max(r_norm / eps_pri, s_norm / eps_dual, viol / cfg.feas_tol)
        if best is None or score < best[0]:
            best = (score, beta.copy(), z[d_sl].copy(), r_norm, s_norm)
        if score <= 1.0:
            converged = True
            break
        if cfg.adaptive_rho:
            if r_norm / eps_pri > 10.0 * s_norm / eps_dual:
                rho *= 2.0
                u = u / 2.0
            elif s_norm / eps_dual > 10.0 * r_norm / eps_pri:
                rho /= 2.0
                u = u * 2.0

    if converged:
        zdiff = z[d_sl]
    else:
        _, beta, zdiff, r_norm, s_norm = best
    B = beta.reshape(T, p)
    if op.fused:
        thetas = zdiff.reshape(T - 1, p) * (scale / op.w_diff)
    else:
        thetas = np.diff(B, axis=0) * scale
    B = _segment_average(B, thetas) * scale
    return QflSolution(
        path=CoefficientPath(B, problem.basis),
        thetas=thetas,
        iterations=it,
        primal_residual=r_norm,
        dual_residual=s_norm,
        objective=objective_value(problem, B),
        converged=converged,
        history=tuple(history),
    )


def max_violation(solution, problem):
    return max(feasibility_report(solution.betas, problem))
