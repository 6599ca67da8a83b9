import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sppc.nlpsolve import FunctionNlp, NlpSolveOptions, kkt_residuals, solve


def equality_qp():
    return FunctionNlp(
        lambda v: v @ v,
        lambda v: 2 * v,
        2,
        eq=lambda v: np.array([v[0] + v[1] - 1.0]),
        eq_jac=lambda v: np.array([[1.0, 1.0]]),
        n_eq=1,
    )


def rosenbrock():
    return FunctionNlp(
        lambda v: (1 - v[0]) ** 2 + 100 * (v[1] - v[0] ** 2) ** 2,
        lambda v: np.array([-2 * (1 - v[0]) - 400 * v[0] * (v[1] - v[0] ** 2), 200 * (v[1] - v[0] ** 2)]),
        2,
    )


def circle_problem():
    # min x + y on the unit circle, with y >= -0.9 as an inequality
    return FunctionNlp(
        lambda v: v[0] + v[1],
        lambda v: np.ones(2),
        2,
        eq=lambda v: np.array([v @ v - 1.0]),
        eq_jac=lambda v: 2 * v[None],
        ineq=lambda v: np.array([v[1] + 0.9]),
        ineq_jac=lambda v: np.array([[0.0, 1.0]]),
        n_eq=1,
        n_ineq=1,
    )


def test_options_validation():
    with pytest.raises(ValueError):
        NlpSolveOptions(constraint_tol=0.0)
    with pytest.raises(ValueError):
        NlpSolveOptions(mu_growth=1.0)
    with pytest.raises(ValueError):
        NlpSolveOptions(multiplier_init="ones")


def test_unconstrained_quadratic():
    nlp = FunctionNlp(lambda v: (v[0] - 1) ** 2, lambda v: 2 * (v - 1), 1)
    sol = solve(nlp, [5.0])
    assert sol.converged
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_equality_qp():
    sol = solve(equality_qp(), [3.0, -1.0])
    assert sol.converged
    np.testing.assert_allclose(sol.x, [0.5, 0.5], atol=1e-5)
    assert sol.multipliers_eq[0] == pytest.approx(-1.0, abs=1e-4)


def test_active_box_bound():
    nlp = FunctionNlp(lambda v: v[0], lambda v: np.ones(1), 1, lower=[2.0])
    sol = solve(nlp, [7.0])
    assert sol.converged
    assert sol.x[0] == pytest.approx(2.0)


def test_start_outside_box_is_clamped():
    nlp = FunctionNlp(lambda v: (v[0] - 3) ** 2, lambda v: 2 * (v - 3), 1, lower=[-1.0], upper=[1.0])
    sol = solve(nlp, [-10.0])
    assert sol.x[0] == pytest.approx(1.0)


def test_rosenbrock():
    sol = solve(rosenbrock(), [-1.2, 1.0])
    assert sol.converged
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-4)


def test_inequality_and_equality():
    sol = solve(circle_problem(), [1.0, 0.0])
    assert sol.converged
    np.testing.assert_allclose(sol.x, [-np.sqrt(0.5), -np.sqrt(0.5)], atol=1e-5)
    sol = solve(FunctionNlp(lambda v: v @ v, lambda v: 2 * v, 2,
                            ineq=lambda v: np.array([v[0] - 1.0]), ineq_jac=lambda v: np.array([[1.0, 0.0]]),
                            n_ineq=1), [0.0, 2.0])
    assert sol.converged
    np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-5)
    assert sol.multipliers_ineq[0] == pytest.approx(-2.0, abs=1e-4)


def test_infeasible_problem_is_not_reported_converged():
    nlp = FunctionNlp(lambda v: v @ v, lambda v: 2 * v, 1,
                      eq=lambda v: np.array([v[0] ** 2 + 1.0]), eq_jac=lambda v: 2 * v[None], n_eq=1,
                      )
    sol = solve(nlp, [0.5], NlpSolveOptions(max_outer=8))
    assert not sol.converged
    assert sol.eq_violation >= 1.0


def test_kkt_at_analytic_optimum():
    r = kkt_residuals(equality_qp(), [0.5, 0.5], [-1.0])
    assert max(r.stationarity, r.eq_feasibility, r.ineq_feasibility, r.complementarity) <= 1e-8


def test_kkt_feasibility_is_constraint_norm():
    nlp = circle_problem()
    x = np.array([0.3, -1.7])
    r = kkt_residuals(nlp, x, [0.0], [0.0])
    assert r.eq_feasibility == abs(x @ x - 1.0)
    assert r.ineq_feasibility == pytest.approx(0.8)


def test_kkt_stationarity_without_constraints():
    nlp = rosenbrock()
    x = np.array([1.0, 1.0])
    assert kkt_residuals(nlp, x).stationarity == 0.0
    x = np.array([0.1, 0.2])
    assert kkt_residuals(nlp, x).stationarity == pytest.approx(np.abs(nlp.objective_gradient(x)).max())


def test_merit_decreases_within_each_outer_iteration():
    sol = solve(circle_problem(), [1.0, 0.0], NlpSolveOptions(trace=True, curvature_refresh=False))
    steps = [e for e in sol.trace if not e.get("failed")]
    assert steps
    for a, b in zip(steps, steps[1:]):
        if a["outer"] == b["outer"]:
            assert b["phi"] < a["phi"]


def test_reported_violations_match_fresh_evaluation():
    nlp = circle_problem()
    sol = solve(nlp, [1.0, 0.0], NlpSolveOptions(max_outer=2))
    assert sol.eq_violation == pytest.approx(np.abs(nlp.equality(sol.x)).max(), abs=1e-12)
    assert sol.ineq_violation == pytest.approx(max(-nlp.inequality(sol.x).min(), 0.0), abs=1e-12)
    assert sol.objective == nlp.objective(sol.x)


def test_determinism():
    a = solve(circle_problem(), [0.2, 0.4])
    b = solve(circle_problem(), [0.2, 0.4])
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations and a.evaluations == b.evaluations


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 4.0))
def test_equality_qp_from_any_start(x0, y0, c):
    nlp = FunctionNlp(lambda v: v @ v, lambda v: 2 * v, 2,
                      eq=lambda v: np.array([v[0] + v[1] - c]), eq_jac=lambda v: np.array([[1.0, 1.0]]), n_eq=1)
    sol = solve(nlp, [x0, y0])
    assert sol.converged
    np.testing.assert_allclose(sol.x, [c / 2, c / 2], atol=1e-5)
