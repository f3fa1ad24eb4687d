import numpy as np
import pytest

from helpers import TIGHT, golden_instances, two_phase_problem
from qfl.basis import make_polynomial_basis, make_truncated_spline_basis
from qfl.errors import UsageError
from qfl.kkt_audit import ADVISORY, FAIL, INAPPLICABLE, PASS, audit, kkt_active, kkt_inactive
from qfl.panel_model import CoefficientPath, PanelDataset, assemble_problem
from qfl.prox_solver import QflSolution, solve

CONST = make_polynomial_basis(0, (0, 1))


def _as_solution(betas, residual=0.0):
    B = np.asarray(betas, dtype=float)
    return QflSolution(path=CoefficientPath(B), thetas=np.diff(B, axis=0), iterations=0,
                       primal_residual=residual, dual_residual=0.0, objective=np.nan, converged=True)


def _lemma_sums(problem, B, t):
    # independent transcription with the weak indicator, 1-based t
    X, Y, M = problem.design, problem.prices, problem.mask
    total = np.zeros(problem.p)
    for k in range(t - 1, problem.T):
        for i in range(problem.n):
            if M[k, i]:
                total += problem.tau * X[i] - X[i] * (Y[k, i] <= X[i] @ B[k])
    return total


def test_saturated_indicators_closed_form():
    data = PanelDataset([0.0, 0.5, 1.0], [[1.0] * 3, [2.0] * 3])
    lam = 0.2
    prob = assemble_problem(data, CONST, 0.5, lam)
    sol = _as_solution([[1.0], [2.0]])
    # every Y equals its fit, so every weak indicator is one
    expected = abs(0.5 * 3 - 3 - 3 * lam * 1.0)
    assert kkt_active(sol, prob, 2, convention="weak") == pytest.approx(expected)
    assert kkt_active(sol, prob, 2, convention="strict") == pytest.approx(abs(1.5 - 0.6))
    # ties may take any indicator value, so the resolved residual reaches zero
    assert kkt_active(sol, prob, 2) == pytest.approx(0.0, abs=1e-12)


def _tiny():
    data = PanelDataset([0.2, 0.5, 0.9], [[0.1, 0.4, -0.3], [2.0, 2.6, 1.7]])
    return assemble_problem(data, make_polynomial_basis(0, (0, 1)), 0.5, 0.1)


def test_tiny_instance_active_condition():
    prob = _tiny()
    sol = solve(prob, TIGHT)
    assert sol.active_set() == [2]
    r = kkt_active(sol, prob, 2)
    assert r <= 1e-3 * prob.penalty_weight
    # the weak-convention value agrees with a direct transcription of the sums
    target = prob.penalty_weight * np.sign(sol.thetas[0])
    direct = np.linalg.norm(_lemma_sums(prob, sol.betas, 2) - target)
    assert kkt_active(sol, prob, 2, convention="weak") == pytest.approx(direct, abs=1e-12)


def test_perturbation_inflates_residual():
    prob = _tiny()
    sol = solve(prob, TIGHT)
    base = max(kkt_active(sol, prob, 2), 1e-3 * prob.penalty_weight / 10)
    bumped = _as_solution(sol.betas + np.array([[0.0], [0.1]]), sol.primal_residual)
    assert kkt_active(bumped, prob, 2) >= 10 * base
    assert audit(bumped, prob).status == FAIL


def test_random_path_fails():
    _, prob, _ = two_phase_problem(seed=3)
    rng = np.random.default_rng(0)
    assert audit(_as_solution(rng.normal(size=(prob.T, prob.p))), prob).status == FAIL


def test_single_period_reduction():
    rng = np.random.default_rng(1)
    x = np.linspace(0, 1, 20)
    data = PanelDataset(x, rng.normal(size=(1, 20)))
    prob = assemble_problem(data, make_polynomial_basis(1, (0, 1)), 0.3, 50.0)
    sol = solve(prob, TIGHT)
    X = prob.design
    below = data.prices[0] <= X @ sol.betas[0]
    classical = np.linalg.norm(0.3 * X.sum(axis=0) - X[below].sum(axis=0))
    assert kkt_inactive(sol, prob, 1, convention="weak") == pytest.approx(prob.penalty_weight - classical)
    assert kkt_inactive(sol, prob, 1) > 0.9 * prob.penalty_weight


def test_large_lambda_margins_positive():
    _, prob, _ = two_phase_problem(lam=1e3, seed=5)
    sol = solve(prob)
    report = audit(sol, prob)
    assert report.active_times == ()
    assert all(m > 0 for m in report.inactive_margins)
    assert report.status == PASS


def test_margin_linear_in_lambda():
    _, prob, _ = two_phase_problem(lam=0.05, seed=6)
    sol = solve(prob)
    for t in range(1, prob.T + 1):
        m0 = kkt_inactive(sol, prob, t, convention="weak")
        for lam in (0.1, 1.0, 7.0):
            m = kkt_inactive(sol, prob.with_lambda(lam), t, convention="weak")
            assert m - m0 == pytest.approx(prob.n * (lam - 0.05), rel=1e-12)
            assert m >= m0


def test_margin_at_active_changepoint():
    prob = _tiny()
    sol = solve(prob, TIGHT)
    assert kkt_inactive(sol, prob, 2) >= -1e-3 * prob.penalty_weight


def test_golden_suite_passes():
    for prob in golden_instances():
        report = audit(solve(prob, TIGHT), prob)
        assert report.status == PASS, report


def test_conventions_reported():
    _, prob, _ = two_phase_problem(seed=7, lam=0.02)
    report = audit(solve(prob, TIGHT), prob)
    assert len(report.active_residuals) == len(report.active_residuals_weak) == len(report.active_residuals_strict)
    assert len(report.inactive_margins_strict) == prob.T
    for r, w, s in zip(report.active_residuals, report.active_residuals_weak, report.active_residuals_strict):
        assert r <= min(w, s) + 1e-9
    d = report.to_dict()
    assert d["passed"] is report.passed and d["status"] == report.status


def test_binding_constraints_advisory():
    x = np.linspace(0, 1, 20)
    Y = np.vstack([np.maximum(0.5 - x, 0)] * 2 + [np.maximum(0.5 - x, 0) + 0.2] * 2)
    basis = make_truncated_spline_basis(2, [0.5], (0, 1), rescale=True)
    prob = assemble_problem(PanelDataset(x, Y), basis, 0.5, 0.01, constraints="noninc,convex")
    report = audit(solve(prob), prob)
    assert report.constraints_active
    assert report.status == ADVISORY
    assert not report.passed


def test_squared_loss_inapplicable():
    _, prob, _ = two_phase_problem(loss="squared")
    report = audit(solve(prob), prob)
    assert report.status == INAPPLICABLE
    assert "inapplicable" in report.message
    with pytest.raises(UsageError):
        kkt_active(solve(prob), prob, 4)


def test_inactive_time_rejected():
    _, prob, _ = two_phase_problem(lam=1e3)
    sol = solve(prob)
    with pytest.raises(UsageError):
        kkt_active(sol, prob, 3)
    with pytest.raises(UsageError):
        kkt_active(sol, prob, 1)
    with pytest.raises(UsageError):
        kkt_inactive(sol, prob, prob.T + 1)
    with pytest.raises(UsageError):
        audit(sol, prob, tol=0)
