"""Independent oracles and instance generators shared by the test modules."""

import itertools

import numpy as np

from scipy.optimize import minimize, minimize_scalar

from qfl.basis import make_polynomial_basis
from qfl.panel_model import PanelDataset, assemble_problem, objective_value
from qfl.prox_solver import SolverConfig

TIGHT = SolverConfig(eps_abs=1e-10)


def cvxpy_reference(problem):
    """Optimal coefficients and value from an interior-point conic solver."""
    import cvxpy as cp

    T, p = problem.T, problem.p
    B = cp.Variable((T, p))
    R = problem.prices - B @ problem.design.T
    W = problem.mask.astype(float)
    if problem.loss == "quantile":
        loss = cp.sum(cp.multiply(W, problem.tau * cp.pos(R) + (1 - problem.tau) * cp.neg(R)))
    else:
        loss = 0.5 * cp.sum(cp.multiply(W, cp.square(R)))
    pen = sum(cp.norm(B[t] - B[t - 1]) for t in range(1, T)) if T > 1 else 0
    cons = []
    if problem.D.size:
        cons.append(B @ problem.D.T <= 0)
    if problem.C.size:
        cons.append(B @ problem.C.T >= 0)
    prob = cp.Problem(cp.Minimize(loss + problem.penalty_weight * pen), cons)
    prob.solve(solver="CLARABEL", tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    return np.asarray(B.value), float(prob.value)


def vertex_enumeration_minimum(problem):
    """Exact minimum for ``p = 1`` by enumerating vertices of the kink arrangement.

    With one coefficient per time the objective is convex and piecewise
    linear in ``(b_1..b_T)``; its kinks lie on ``x_i b_t = Y_ti`` and
    ``b_t = b_{t-1}``. Every vertex (``T`` independent kink equations) is
    evaluated and the smallest value returned.
    """
    assert problem.p == 1
    T, X = problem.T, problem.design[:, 0]
    rows, rhs = [], []
    for t in range(T):
        for i in range(problem.n):
            if problem.mask[t, i] and X[i] != 0:
                r = np.zeros(T)
                r[t] = X[i]
                rows.append(r)
                rhs.append(problem.prices[t, i])
    for t in range(1, T):
        r = np.zeros(T)
        r[t], r[t - 1] = 1.0, -1.0
        rows.append(r)
        rhs.append(0.0)
    rows, rhs = np.array(rows), np.array(rhs)
    best, arg = np.inf, None
    for combo in itertools.combinations(range(len(rows)), T):
        M = rows[list(combo)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        b = np.linalg.solve(M, rhs[list(combo)])
        val = objective_value(problem, b[:, None])
        if val < best:
            best, arg = val, b
    return best, arg[:, None]


def golden_instances(count=20, seed=2024):
    """Small unconstrained instances: ``T <= 3``, ``n <= 5``, ``p <= 2``, tau in {0.3, 0.5, 0.7}."""
    out = []
    rng = np.random.default_rng(seed)
    for k in range(count):
        T = int(rng.integers(1, 4))
        n = int(rng.integers(2, 6))
        p = 1 + k % 2
        tau = (0.3, 0.5, 0.7)[k % 3]
        lam = float(rng.choice([0.02, 0.1, 0.4, 1.0]))
        strikes = np.sort(rng.uniform(0, 1, n))
        strikes[0], strikes[-1] = 0.0, 1.0
        if n == 2:
            strikes = np.array([0.0, 1.0])
        level = np.cumsum(rng.choice([0.0, 1.5], size=T))
        Y = level[:, None] + rng.normal(size=(T, n))
        basis = make_polynomial_basis(p - 1, (0, 1))
        out.append(assemble_problem(PanelDataset(strikes, Y), basis, tau, lam))
    return out


def two_phase_problem(n=40, T=6, jump_at=4, seed=0, lam=0.05, tau=0.5, dist="normal", loss="quantile",
                      noise=0.3, constraints=()):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, n)
    basis = make_polynomial_basis(2, (0, 1))
    X = np.column_stack([x**0, x, x**2])
    betas = np.array([[1, -1, 0.5]] * (jump_at - 1) + [[2, 0.5, -0.5]] * (T - jump_at + 1))
    e = rng.standard_normal((T, n)) if dist == "normal" else rng.standard_cauchy((T, n))
    data = PanelDataset(x, betas @ X.T + noise * e)
    return data, assemble_problem(data, basis, tau, lam, loss, constraints), betas


def quantile_fit_lp(X, y, tau):
    """Unpenalised quantile regression by HiGHS (independent of the package's refit code)."""
    from scipy.optimize import linprog

    m, p = X.shape
    c = np.concatenate([np.zeros(p), tau * np.ones(m), (1 - tau) * np.ones(m)])
    A = np.hstack([X, np.eye(m), -np.eye(m)])
    res = linprog(c, A_eq=A, b_eq=y, bounds=[(None, None)] * p + [(0, None)] * (2 * m), method="highs")
    return res.x[:p], res.fun


def brute_prox_check(v, tau, sigma):
    # piecewise quadratic with a kink at 0: minimise each piece numerically
    f = lambda u: sigma * u * (tau - (u < 0)) + 0.5 * (u - v) ** 2  # noqa: E731
    lo, hi = -abs(v) - 10 * sigma, abs(v) + 10 * sigma
    cands = [0.0] + [minimize_scalar(f, bounds=b, method="bounded", options={"xatol": 1e-10}).x
                     for b in ((lo, 0.0), (0.0, hi))]
    return min(cands, key=f)


def brute_prox_group(v, kappa):
    # smooth away from the origin, so compare a quasi-Newton run with u = 0
    f = lambda u: kappa * np.linalg.norm(u) + 0.5 * np.sum((u - v) ** 2)  # noqa: E731
    grad = lambda u: kappa * u / np.linalg.norm(u) + (u - v)  # noqa: E731
    run = minimize(f, v, jac=grad, method="BFGS", options={"gtol": 1e-12})
    return min([run.x, np.zeros_like(v)], key=f)
