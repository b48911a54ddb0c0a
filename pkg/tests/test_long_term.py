import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellfree_fl.long_term import (LongTermOptions, SurrogateState, T_value_and_grad, in_H,
                                   initial_selection, master_kkt, penalty_value_and_grad,
                                   phi_schedule, pi_schedule, project_H, round_selection,
                                   run_algorithm2, solve_master, step_update, update_surrogate)
from cellfree_fl.network import PlacementConfig, generate_placement
from cellfree_fl.params import SystemParams


def test_schedules():
    assert phi_schedule(1) == 1.0
    assert phi_schedule(10) == pytest.approx(10 ** -0.9)
    assert pi_schedule(0) == 1.0
    assert pi_schedule(1000) == 0.5


def test_schedule_conditions():
    # both steps vanish, and the iterate step is eventually small against the averaging step
    ratio = lambda n: pi_schedule(n) / phi_schedule(n)
    assert phi_schedule(10 ** 8) < 1e-6 and pi_schedule(10 ** 8) < 1e-4
    assert ratio(10 ** 12) < ratio(10 ** 8) < ratio(10 ** 5)
    assert sum(pi_schedule(n) for n in range(1, 100_000)) > 4000


# -- one-sample gradient --------------------------------------------------------------------
def test_T_value_example():
    val, grad = T_value_and_grad([1, 1, 0], [2.0, 4.0, 0.0], q=90)
    assert val == pytest.approx(90 * 6 / 2)
    # d/da_k [q a.s / sum a] = q (s_k sum a - a.s) / (sum a)^2
    np.testing.assert_allclose(grad, [90 * (2 * 2 - 6) / 4, 90 * (4 * 2 - 6) / 4, 90 * (0 - 6) / 4])


@settings(max_examples=50)
@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=8), st.integers(0, 10 ** 6))
def test_T_gradient_finite_difference(a, seed):
    a = np.array(a)
    s = np.random.default_rng(seed).uniform(0, 5, a.size)
    _, grad = T_value_and_grad(a, s, q=90)
    h = 1e-6
    fd = np.array([(T_value_and_grad(a + h * e, s, 90)[0] - T_value_and_grad(a - h * e, s, 90)[0]) / (2 * h)
                   for e in np.eye(a.size)])
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6)


def test_T_rejects_empty_selection():
    with pytest.raises(ValueError):
        T_value_and_grad(np.zeros(3), np.ones(3), 90)


# -- surrogate recursion --------------------------------------------------------------------
def test_surrogate_matches_unrolled_weights():
    rng = np.random.default_rng(0)
    vals, grads = rng.normal(size=6), rng.normal(size=(6, 3))
    state = SurrogateState(np.ones(3))
    for n in range(1, 7):
        state = update_surrogate(state, vals[n - 1], grads[n - 1], phi_schedule(n))
    # weight of sample j is phi_j * prod_{i > j} (1 - phi_i)
    phis = np.array([phi_schedule(n) for n in range(1, 7)])
    w = np.array([phis[j] * np.prod(1 - phis[j + 1:]) for j in range(6)])
    assert w.sum() == pytest.approx(1.0)
    assert state.g_val == pytest.approx(w @ vals)
    np.testing.assert_allclose(state.g_grad, w @ grads)
    assert state.n == 6


def test_surrogate_rejects_bad_phi():
    with pytest.raises(ValueError):
        update_surrogate(SurrogateState(np.ones(2)), 1.0, np.ones(2), 0.0)


def test_penalty():
    V, g = penalty_value_and_grad(np.array([0.0, 0.5, 1.0]), lam=2.0)
    assert V == pytest.approx(0.25)
    np.testing.assert_allclose(g, [2.0, 0.0, -2.0])
    assert penalty_value_and_grad(np.array([0, 1, 1.0]))[0] == 0.0


# -- projection onto H ------------------------------------------------------------------------
def _qp_projection(y, N_qol):
    a = cp.Variable(y.size)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(a - y)), [a >= 0, a <= 1, cp.sum(a) >= N_qol])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return a.value


def test_projection_matches_reference_qp():
    rng = np.random.default_rng(1)
    for _ in range(100):
        N = int(rng.integers(1, 16))
        Nq = int(rng.integers(1, N + 1))
        y = rng.normal(0.4, 1.0, N)
        proj = project_H(y, Nq)
        np.testing.assert_allclose(proj.a, _qp_projection(y, Nq), atol=1e-6)
        assert master_kkt(y, proj.a, proj.mu, Nq) <= 1e-8


vec = st.lists(st.floats(-3, 3), min_size=1, max_size=12)


@settings(max_examples=200)
@given(vec, st.data())
def test_projection_variational_inequality(y, data):
    y = np.array(y)
    Nq = data.draw(st.integers(1, y.size))
    a = project_H(y, Nq).a
    assert in_H(a, Nq)
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
    for _ in range(5):
        z = project_H(rng.uniform(-1, 2, y.size), Nq).a  # arbitrary point of H
        assert (y - a) @ (z - a) <= 1e-9


def test_projection_cases():
    np.testing.assert_allclose(project_H(np.array([0.2, 1.4, -0.3]), 1).a, [0.2, 1.0, 0.0])
    # sum constraint active: 1 + 3 mu = 2 gives mu = 1/3, no clipping
    np.testing.assert_allclose(project_H(np.array([0.5, 0.5, 0.0]), 2).a, [5 / 6, 5 / 6, 1 / 3])
    # upper bound binds: min(0.9 + mu, 1) + 1 + (0.2 + mu) = 2.5 gives mu = 0.3
    np.testing.assert_allclose(project_H(np.array([0.9, 0.95, 0.2]), 2.5).a, [1.0, 1.0, 0.5])
    np.testing.assert_allclose(project_H(np.zeros(4), 4).a, np.ones(4))
    with pytest.raises(ValueError):
        project_H(np.zeros(2), 3)


def test_master_is_proximal_gradient_step():
    a_n = np.array([0.5, 0.5, 0.5])
    grad = np.array([1.0, -1.0, 0.0])
    # unconstrained minimiser a_n - grad / (2 tau) lies inside H for tau = 2
    np.testing.assert_allclose(solve_master(a_n, grad, 2.0, 1), [0.25, 0.75, 0.5])
    with pytest.raises(ValueError):
        solve_master(a_n, grad, 0.0, 1)


def test_step_update():
    np.testing.assert_allclose(step_update([0, 1], [1, 0], 0.25), [0.25, 0.75])
    with pytest.raises(ValueError):
        step_update([0], [1], 1.5)


def test_round_selection():
    np.testing.assert_array_equal(round_selection([0.9, 0.2, 0.6, 0.1], 1), [1, 0, 1, 0])
    np.testing.assert_array_equal(round_selection([0.1, 0.4, 0.3, 0.0], 2), [0, 1, 1, 0])
    np.testing.assert_array_equal(round_selection(np.full(8, 0.5), 5), [1, 1, 1, 1, 1, 0, 0, 0])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.data())
def test_round_selection_meets_quota(a, data):
    Nq = data.draw(st.integers(1, len(a)))
    out = round_selection(a, Nq)
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert out.sum() >= Nq


def test_initial_selection():
    assert np.all(initial_selection(5, 2, "ones") == 1)
    a = initial_selection(6, 4, "random", 3)
    assert in_H(a, 4)
    with pytest.raises(ValueError):
        initial_selection(3, 1, "zeros")


# -- full loop ------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_run():
    pl = generate_placement(PlacementConfig(6, 5, 1.0, "C2"), 0)
    p = SystemParams(N_qol=2)
    opts = LongTermOptions(max_iter=8)
    return pl, p, opts, run_algorithm2(pl, p, seed=11, options=opts)


def test_algorithm_iterates_stay_in_H(small_run):
    _, p, _, res = small_run
    assert len(res.trace) == res.iterations == 8
    assert all(row["sum_a"] >= p.N_qol - 1e-9 for row in res.trace)
    assert in_H(res.a_relaxed, p.N_qol)
    assert res.n_selected >= p.N_qol


def test_algorithm_deterministic(small_run):
    pl, p, opts, res = small_run
    again = run_algorithm2(pl, p, seed=11, options=opts)
    np.testing.assert_array_equal(again.a_relaxed, res.a_relaxed)


def test_trace_csv(small_run):
    lines = small_run[3].trace_csv().splitlines()
    assert lines[0].startswith("n,sum_a,V")
    assert len(lines) == 9


def test_algorithm_rejects_impossible_quota():
    pl = generate_placement(PlacementConfig(2, 2, 1.0), 0)
    with pytest.raises(ValueError):
        run_algorithm2(pl, SystemParams(N_qol=3), seed=0)
