import cvxpy as cp
import numpy as np
import pytest
import scipy.sparse as sp

from cellfree_fl import conic
from cellfree_fl.conic import ConicProgram, Status, kkt_residuals


def test_bounded_lp():
    sol = conic.solve(ConicProgram(1, c=np.array([1.0]), lb=np.array([3.0])))
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(3.0, abs=1e-7)


def test_rotated_cone_minimum():
    # minimise x subject to 2 * x * 1 >= 4^2
    prog = ConicProgram(1, c=np.array([1.0]))
    prog.add_rotated_cones(np.array([[1.0]]), 0.0, np.zeros((1, 1)), 1.0, np.zeros((1, 1)), 4.0, 1)
    sol = conic.solve(prog)
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(8.0, abs=1e-6)


def test_quadratic_constraint_disc():
    # maximise x1 + x2 on the unit disc
    prog = ConicProgram(2, c=np.array([-1.0, -1.0]))
    prog.add_quadratic(np.eye(2), np.zeros(2), -1.0)
    sol = conic.solve(prog)
    np.testing.assert_allclose(sol.x, [2 ** -0.5] * 2, atol=1e-6)


def test_box_qp_is_clipping():
    y = np.array([-0.4, 0.3, 1.7])
    prog = ConicProgram(3, c=-y, P=sp.csc_matrix(np.eye(3)), lb=np.zeros(3), ub=np.ones(3))
    sol = conic.solve(prog, tol=1e-9)
    np.testing.assert_allclose(sol.x, np.clip(y, 0, 1), atol=1e-7)


def test_equality_constraint():
    prog = ConicProgram(2, c=np.array([1.0, 2.0]), lb=np.zeros(2))
    prog.add_linear(np.array([[1.0, 1.0]]), 1.0, "==")
    np.testing.assert_allclose(conic.solve(prog).x, [1, 0], atol=1e-7)


def test_infeasible_reported():
    prog = ConicProgram(1, c=np.array([1.0]), lb=np.array([1.0]), ub=np.array([0.0]))
    assert conic.solve(prog).status is Status.INFEASIBLE


def test_unknown_sense_rejected():
    with pytest.raises(ValueError):
        ConicProgram(1).add_linear(np.ones((1, 1)), 0.0, "<")


def test_wrong_width_rejected():
    with pytest.raises(ValueError):
        ConicProgram(2).add_linear(np.ones((1, 3)), 0.0)


def _random_socp(rng):
    n = int(rng.integers(2, 7))
    c = rng.normal(size=n)
    x_feas = rng.uniform(-0.5, 0.5, n)
    lb, ub = -np.ones(n) * 2, np.ones(n) * 2
    prog = ConicProgram(n, c=c, lb=lb, ub=ub)
    quads, cones, lins = [], [], []
    for _ in range(int(rng.integers(1, 3))):
        F = rng.normal(size=(2, n))
        g = rng.normal(size=n)
        d = -(np.sum((F @ x_feas) ** 2) + g @ x_feas) - rng.uniform(0.1, 1.0)
        prog.add_quadratic(F, g, d)
        quads.append((F, g, d))
    X, Y, Z = rng.normal(size=(1, n)), rng.normal(size=(1, n)), rng.normal(size=(2, n))
    x0 = -X @ x_feas + rng.uniform(0.5, 1.5, 1)
    y0 = -Y @ x_feas + rng.uniform(0.5, 1.5, 1)
    z0 = -Z @ x_feas + rng.uniform(-0.3, 0.3, 2)
    prog.add_rotated_cones(X, x0, Y, y0, Z, z0, 2)
    cones.append((X, x0, Y, y0, Z, z0))
    A = rng.normal(size=(2, n))
    b = A @ x_feas + rng.uniform(0.1, 1.0, 2)
    prog.add_linear(A, b, "<=")
    lins.append((A, b))
    if rng.uniform() < 0.5:
        P = rng.normal(size=(n, n))
        prog.P = sp.csc_matrix(P @ P.T)
    return prog, quads, cones, lins


def _cvxpy_reference(prog, quads, cones, lins):
    x = cp.Variable(prog.n_vars)
    obj = prog.c @ x
    if prog.P is not None:
        obj = obj + 0.5 * cp.quad_form(x, cp.psd_wrap(prog.P.toarray()))
    cons = [x >= prog.lb, x <= prog.ub]
    for F, g, d in quads:
        cons.append(cp.sum_squares(F @ x) + g @ x + d <= 0)
    for X, x0, Y, y0, Z, z0 in cones:
        xs, ys = X @ x + x0, Y @ x + y0
        # 2 x y >= ||z||^2  <=>  ||[sqrt2 z, x - y]|| <= x + y
        cons.append(cp.SOC(xs[0] + ys[0], cp.hstack([np.sqrt(2) * (Z @ x + z0), xs - ys])))
    for A, b in lins:
        cons.append(A @ x <= b)
    prob = cp.Problem(cp.Minimize(obj), cons)
    try:
        prob.solve(solver=cp.CVXOPT, abstol=1e-9, reltol=1e-9, feastol=1e-9)
    except cp.error.SolverError:
        prob.solve(solver=cp.SCS, eps=1e-10, max_iters=200_000)
    return prob.value, x.value


def test_random_socps_match_reference_solver():
    rng = np.random.default_rng(12)
    for _ in range(50):
        prog, quads, cones, lins = _random_socp(rng)
        sol = conic.solve(prog, tol=1e-8)
        assert sol.status is Status.OPTIMAL
        ref_obj, _ = _cvxpy_reference(prog, quads, cones, lins)
        assert sol.obj == pytest.approx(ref_obj, abs=1e-6 * (1 + abs(ref_obj)))
        assert prog.max_violation(sol.x) <= 1e-7


def test_kkt_zero_at_exact_vertex_and_grows_linearly():
    prog = ConicProgram(2, c=np.array([1.0, 1.0]), lb=np.zeros(2))
    y = np.array([1.0, 1.0])  # bound multipliers equal the cost
    assert kkt_residuals(prog, np.zeros(2), y).max() == 0.0
    for delta in (1e-2, 1e-4, 1e-6):
        r = kkt_residuals(prog, np.array([-delta, 0.0]), y).max()
        assert delta / 4 <= r <= 4 * delta


def test_counts_and_violation():
    prog = ConicProgram(2, lb=np.zeros(2))
    prog.add_linear(np.ones((1, 2)), 1.0)
    prog.add_rotated_cones(np.eye(2), 0.0, np.eye(2), 1.0, np.eye(2), 0.0, 1)
    assert prog.counts() == {"variables": 2, "linear": 1, "bounds": 2, "quadratic": 0, "rotated_cones": 2}
    assert prog.max_violation(np.array([0.5, 0.5])) == 0.0
    assert prog.max_violation(np.array([1.0, 1.0])) == pytest.approx(1.0)
