import numpy as np
import pytest

from helpers import (
    TIGHT,
    brute_prox_check,
    brute_prox_group,
    cvxpy_reference,
    golden_instances,
    quantile_fit_lp,
    two_phase_problem,
    vertex_enumeration_minimum,
)
from qfl.basis import make_polynomial_basis, make_truncated_spline_basis
from qfl.panel_model import PanelDataset, assemble_problem, feasibility_report, objective_value
from qfl.prox_solver import SolverConfig, max_violation, project_orthant, prox_check, prox_group_l2, solve


def test_prox_check_examples():
    assert prox_check(2.0, 0.5, 1.0) == 1.5
    assert prox_check(0.0, 0.2, 3.0) == 0.0
    assert prox_check(-1.0, 0.3, 1.0) == pytest.approx(-0.3)


def test_prox_check_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v, tau, sigma = rng.uniform(-8, 8), rng.uniform(0.05, 0.95), rng.uniform(0.1, 4)
        assert prox_check(v, tau, sigma) == pytest.approx(brute_prox_check(v, tau, sigma), abs=1e-6)


def test_prox_group_examples():
    assert np.allclose(prox_group_l2([3.0, 4.0], 1.0), [2.4, 3.2])
    assert prox_group_l2([0.3, 0.4], 1.0).tolist() == [0.0, 0.0]
    v = np.array([0.1, -2.0, 7.0])
    assert np.array_equal(prox_group_l2(v, 0.0), v)


def test_prox_group_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        dim = int(rng.integers(1, 4))
        v = rng.normal(size=dim) * rng.uniform(0.1, 3)
        kappa = rng.uniform(0, 3)
        assert np.allclose(prox_group_l2(v, kappa), brute_prox_group(v, kappa), atol=1e-6)


def test_project_orthant():
    assert project_orthant([1.0, -2.0], "nonpositive").tolist() == [0, -2]
    assert project_orthant([1.0, -2.0], "nonnegative").tolist() == [1, 0]
    rng = np.random.default_rng(2)
    for sense in ("nonpositive", "nonnegative"):
        v = rng.normal(size=50)
        once = project_orthant(v, sense)
        assert np.array_equal(project_orthant(once, sense), once)
    with pytest.raises(ValueError):
        project_orthant([1.0], "upward")


def test_config_validation():
    assert SolverConfig().rho == 1.0 and SolverConfig().max_iters == 20000
    assert SolverConfig().over_relaxation == 1.6
    with pytest.raises(ValueError):
        SolverConfig(rho=0)
    with pytest.raises(ValueError):
        SolverConfig(over_relaxation=2.0)
    with pytest.raises(ValueError):
        SolverConfig(eps_abs=0)


def test_median_line():
    x = np.linspace(0, 1, 11)
    data = PanelDataset(x, x[None, :])
    prob = assemble_problem(data, make_polynomial_basis(1, (0, 1)), 0.5, 0.3)
    sol = solve(prob, TIGHT)
    assert np.allclose(sol.betas[0], [0, 1], atol=1e-4)


def test_golden_suite_objective():
    for prob in golden_instances():
        sol = solve(prob, TIGHT)
        ref = vertex_enumeration_minimum(prob)[0] if prob.p == 1 else cvxpy_reference(prob)[1]
        assert sol.objective == pytest.approx(ref, abs=1e-4)


@pytest.mark.parametrize("loss", ["quantile", "squared"])
@pytest.mark.parametrize("dist", ["normal", "cauchy"])
def test_matches_conic_solver(loss, dist):
    _, prob, _ = two_phase_problem(n=30, T=6, lam=0.05, loss=loss, dist=dist, seed=3)
    sol = solve(prob)
    B, ref = cvxpy_reference(prob)
    assert sol.converged
    assert sol.objective == pytest.approx(ref, rel=1e-6)
    assert np.abs(sol.betas - B).max() < 1e-3


def test_constrained_matches_conic_solver():
    rng = np.random.default_rng(7)
    x = np.linspace(0, 1, 25)
    clean = np.maximum(0.6 - x, 0) ** 2 + 0.05
    Y = clean[None, :] + np.array([[0.0]] * 3 + [[0.1]] * 3) + 0.02 * rng.standard_t(3, (6, 25))
    basis = make_truncated_spline_basis(2, [0.3, 0.6], (0, 1), rescale=True)
    prob = assemble_problem(PanelDataset(x, Y), basis, 0.5, 0.02, constraints="noninc,convex")
    sol = solve(prob)
    _, ref = cvxpy_reference(prob)
    assert max_violation(sol, prob) <= 1e-6
    assert sol.objective == pytest.approx(ref, rel=1e-5)


def test_large_lambda_fuses_everything():
    _, prob, _ = two_phase_problem(lam=1e6)
    sol = solve(prob)
    assert not np.any(sol.thetas)
    assert sol.active_set() == []
    assert np.abs(sol.betas - sol.betas[0]).max() <= 1e-8


def test_zero_lambda_separates():
    data, prob, _ = two_phase_problem(lam=0.0, T=4, n=30)
    sol = solve(prob, TIGHT)
    per_time = sum(quantile_fit_lp(prob.design, data.prices[t], 0.5)[1] for t in range(prob.T))
    assert sol.objective == pytest.approx(per_time, abs=1e-5)


def test_recovers_noiseless_jump():
    _, prob, truth = two_phase_problem(noise=0.0, lam=0.02, T=8, jump_at=5)
    sol = solve(prob, TIGHT)
    assert sol.active_set() == [5]


def test_local_optimality_probe():
    # the second phase slopes upward near x = 0, so the monotone constraint binds
    rng = np.random.default_rng(8)
    _, prob, _ = two_phase_problem(constraints=("noninc",), lam=0.05, seed=4)
    sol = solve(prob, TIGHT)
    tried = 0
    for _ in range(200):
        cand = sol.betas + 1e-3 * rng.normal(size=sol.betas.shape)
        if max(feasibility_report(cand, prob)) > 0:
            continue
        tried += 1
        assert objective_value(prob, cand) >= sol.objective - 1e-7
    assert tried >= 20


def test_quantile_scaling_keeps_lambda():
    data, prob, _ = two_phase_problem(seed=5)
    sol = solve(prob, TIGHT)
    for c in (0.01, 7.0, 1e3):
        scaled = assemble_problem(PanelDataset(data.strikes, c * data.prices), prob.basis, 0.5, prob.lam)
        s2 = solve(scaled, TIGHT)
        assert np.allclose(s2.betas, c * sol.betas, rtol=1e-6, atol=1e-6 * c * np.abs(sol.betas).max())
        assert s2.active_set() == sol.active_set()


def test_squared_scaling_scales_lambda():
    data, prob, _ = two_phase_problem(seed=6, loss="squared", lam=0.02)
    sol = solve(prob, TIGHT)
    for c in (0.1, 20.0):
        scaled = assemble_problem(PanelDataset(data.strikes, c * data.prices), prob.basis, 0.5, c * prob.lam,
                                  loss="squared")
        s2 = solve(scaled, TIGHT)
        assert np.allclose(s2.betas, c * sol.betas, rtol=1e-6, atol=1e-6 * c * np.abs(sol.betas).max())


def test_history_eventually_monotone():
    _, prob, _ = two_phase_problem(seed=9, T=5)
    sol = solve(prob, SolverConfig(eps_abs=1e-12, eps_rel=1e-12, max_iters=4000, history_every=100))
    hist = np.array(sol.history)
    tail = hist[len(hist) // 2:]
    assert np.all(np.diff(tail) <= 1e-8 * max(1.0, abs(tail[-1])))


def test_non_convergence_returns_best_iterate():
    _, prob, _ = two_phase_problem(constraints=("noninc", "convex"))
    sol = solve(prob, SolverConfig(max_iters=7))
    assert not sol.converged
    assert sol.iterations == 7
    assert np.all(np.isfinite(sol.betas)) and np.isfinite(sol.objective)


def test_sparse_and_dense_paths_agree():
    _, prob, _ = two_phase_problem(seed=10)
    dense = solve(prob, SolverConfig(eps_abs=1e-10))
    sparse = solve(prob, SolverConfig(eps_abs=1e-10, dense_limit=0))
    assert dense.active_set() == sparse.active_set()
    assert dense.objective == pytest.approx(sparse.objective, rel=1e-8)


def test_missing_cells_are_ignored():
    data, prob, _ = two_phase_problem(seed=11, T=4, n=20)
    Y = data.prices.copy()
    Y[1, 3] = np.nan
    masked = assemble_problem(PanelDataset(data.strikes, Y), prob.basis, 0.5, prob.lam)
    sol = solve(masked, TIGHT)
    _, ref = cvxpy_reference(masked)
    assert sol.objective == pytest.approx(ref, rel=1e-6)


def test_deterministic():
    _, prob, _ = two_phase_problem(seed=12)
    a, b = solve(prob), solve(prob)
    assert np.array_equal(a.betas, b.betas) and np.array_equal(a.thetas, b.thetas)
