import math

import cvxpy as cp
import numpy as np
import pytest
from conftest import balanced_stance
from hypothesis import given, settings
from hypothesis import strategies as st
from instances import leaf_triples, random_instance, random_psd, random_spd, run_pipeline
from oracles import constrained_wls, wls_objective

from rmpwbc.model import WitnessPair
from rmpwbc.rmp import CollisionRmpParams, Rmp, collision_rmp, pullback, resolve
from rmpwbc.sim import nominal_state
from rmpwbc.wbc import (
    ApfParams,
    PriorityStack,
    TaskDef,
    WbcQpInfeasible,
    WbcQpProblem,
    apf_baseline_accel,
    apf_rmp,
    contact_accel,
    contact_constraints,
    dyn_pinv,
    final_accel,
    modified_pullback,
    project_tasks,
    rmp_objective,
    solve_wbc_qp,
)

# -- dynamically consistent inverse ------------------------------------------------


def test_dyn_pinv_with_identity_mass_is_moore_penrose(rng):
    J = rng.normal(size=(3, 7))
    assert np.allclose(dyn_pinv(J, np.eye(7)), np.linalg.pinv(J), atol=1e-12)


def test_dyn_pinv_of_square_jacobian_is_inverse(rng):
    J = rng.normal(size=(5, 5))
    assert np.allclose(dyn_pinv(J, random_spd(rng, 5)), np.linalg.inv(J), atol=1e-9)


def test_dyn_pinv_right_inverse_residual(rng):
    for _ in range(20):
        n = int(rng.integers(4, 12))
        J = rng.normal(size=(int(rng.integers(1, n)), n))
        assert np.abs(J @ dyn_pinv(J, random_spd(rng, n)) - np.eye(J.shape[0])).max() < 1e-8


def test_dyn_pinv_rank_deficient_jacobian_is_finite(rng):
    J = rng.normal(size=(1, 6))
    J = np.vstack([J, 2 * J])
    Jbar = dyn_pinv(J, random_spd(rng, 6))
    assert np.all(np.isfinite(Jbar))
    assert np.allclose(J @ Jbar @ J, J, atol=1e-9)


# -- contact level -----------------------------------------------------------------


def test_contact_accel_at_rest_is_zero(rng):
    Ainv = np.linalg.inv(random_spd(rng, 8))
    qdd, _ = contact_accel(Ainv, rng.normal(size=(3, 8)), np.zeros(3))
    assert np.allclose(qdd, 0.0)


def test_contact_accel_cancels_contact_bias(rng):
    Ainv = np.linalg.inv(random_spd(rng, 9))
    Jc, bias = rng.normal(size=(3, 9)), rng.normal(size=3)
    qdd, N0 = contact_accel(Ainv, Jc, bias)
    assert np.abs(Jc @ qdd + bias).max() < 1e-8
    assert np.abs(N0 @ N0 - N0).max() < 1e-8
    assert np.abs(Jc @ N0).max() < 1e-8


def test_no_contact_is_vacuous(rng):
    qdd, N0 = contact_accel(np.eye(6), None, None)
    assert np.array_equal(qdd, np.zeros(6)) and np.array_equal(N0, np.eye(6))


# -- task projection ---------------------------------------------------------------


def test_empty_stack_gives_zero_command():
    qdd, N = project_tasks(PriorityStack(None, None, []), np.eye(5))
    assert np.array_equal(qdd, np.zeros(5)) and np.array_equal(N, np.eye(5))


def test_single_task_unit_mass_is_least_squares(rng):
    J, bias, xdd = rng.normal(size=(2, 6)), rng.normal(size=2), rng.normal(size=2)
    qdd, _ = project_tasks(PriorityStack(None, None, [TaskDef("t", J, bias, xdd)]), np.eye(6))
    assert np.allclose(qdd, np.linalg.pinv(J) @ (xdd - bias), atol=1e-12)


def test_stack_tracking_and_projector_algebra(rng):
    inst = random_instance(rng, n=12, n_levels=2, contact=True, n_leaves=1)
    stack = inst.stack()
    qdd, N = project_tasks(stack, np.linalg.inv(inst.A), check_rank=True)
    assert np.abs(inst.Jc @ qdd + inst.Jc_dqd).max() < 1e-6
    for level, task in zip(stack.levels[1:], inst.tasks):
        assert level.full_rank
        assert np.abs(task.J @ level.qdd_cmd + task.Jdqd - task.xdd_cmd).max() < 1e-6
        # lower levels leave this one alone
        assert np.abs(task.J @ qdd - task.J @ level.qdd_cmd).max() < 1e-6
    assert np.abs(N @ N - N).max() < 1e-8
    for task in inst.tasks:
        assert np.abs(task.J @ N).max() < 1e-8
    assert np.abs(inst.Jc @ N).max() < 1e-8


def test_rank_collapse_is_reported(rng):
    J = rng.normal(size=(2, 6))
    stack = PriorityStack(None, None, [TaskDef("a", J, np.zeros(2), np.zeros(2)), TaskDef("b", J[:1], np.zeros(1), np.ones(1))])
    project_tasks(stack, np.eye(6), check_rank=True)
    assert stack.levels[1].full_rank
    assert not stack.levels[2].full_rank and stack.levels[2].rank == 0


# -- modified pullback and final command ----------------------------------------------


def test_modified_pullback_without_constraints_is_plain_pullback(rng):
    M, f = random_psd(rng, 5), rng.normal(size=5)
    M_rmp, f_rmp = modified_pullback(Rmp.natural(f, M), np.eye(5), np.zeros(5))
    assert np.allclose(M_rmp, M) and np.allclose(f_rmp, f)


def test_modified_pullback_with_zero_metric(rng):
    N, f = rng.normal(size=(5, 5)), rng.normal(size=5)
    M_rmp, f_rmp = modified_pullback(Rmp.natural(f, np.zeros((5, 5))), N, rng.normal(size=5))
    assert np.array_equal(M_rmp, np.zeros((5, 5)))
    assert np.allclose(f_rmp, N.T @ f)


def test_final_accel_with_zero_force_keeps_task_command(rng):
    qdd_k = rng.normal(size=6)
    assert np.array_equal(final_accel(qdd_k, rng.normal(size=(6, 6)), random_psd(rng, 6), np.zeros(6)), qdd_k)


def test_single_attractor_reproduces_rmpflow(rng):
    n = 7
    J, M, a, bias = rng.normal(size=(n, n)), random_psd(rng, n), rng.normal(size=n), rng.normal(size=n)
    leaves = [(Rmp.canonical(a, M), J, bias)]
    root = pullback(leaves)
    out = final_accel(np.zeros(n), np.eye(n), *modified_pullback(root, np.eye(n), np.zeros(n)))
    assert np.allclose(out, resolve(root).vector, atol=1e-10)


def test_modified_pullback_metric_is_psd(rng):
    for _ in range(20):
        inst = random_instance(rng)
        _, qdd_k, N_k = run_pipeline(inst)
        M_rmp, _ = modified_pullback(pullback(leaf_triples(inst.leaves)), N_k, qdd_k)
        assert np.linalg.eigvalsh(M_rmp).min() >= -1e-9 * max(1.0, np.abs(M_rmp).max())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_closed_form_attains_constrained_least_squares_optimum(seed):
    inst = random_instance(np.random.default_rng(seed))
    qdd, _, _ = run_pipeline(inst)
    ref = wls_objective(constrained_wls(*inst.constraints(), inst.leaves), inst.leaves)
    obj = wls_objective(qdd, inst.leaves)
    # exactly satisfiable instances have optimum 0; measure error against the problem's own scale
    scale = max(abs(ref), wls_objective(np.zeros(inst.n), inst.leaves))
    assert abs(obj - ref) <= 1e-6 * scale
    assert rmp_objective(qdd, leaf_triples(inst.leaves)) == pytest.approx(obj, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmps_do_not_disturb_prioritized_tasks(seed):
    inst = random_instance(np.random.default_rng(seed), n_leaves=3)
    qdd, qdd_k, _ = run_pipeline(inst)
    for task in inst.tasks:
        assert np.abs(task.J @ qdd - task.J @ qdd_k).max() < 1e-6
    if inst.Jc is not None:
        assert np.abs(inst.Jc @ qdd + inst.Jc_dqd).max() < 1e-6


# -- relaxation QP -----------------------------------------------------------------


def _biped_problem(biped, q, qd, feet=("l_foot", "r_foot"), mu=0.7, Q1=1.0, Q2=100.0):
    kin = biped.kinematics(q, qd)
    Jc = np.vstack([kin.frame_jacobian(f) for f in feet]) if feet else np.zeros((0, biped.nv))
    W, w0 = contact_constraints(len(feet), mu)
    S_a, _ = biped.selection_matrices()
    prob = WbcQpProblem(kin.mass_matrix(), kin.bias_forces(), Jc, W, w0, Q1 * np.eye(3 * len(feet)), Q2 * np.eye(6), S_a)
    return prob, kin


def _dense_reference(prob, qdd_cmd, f_mpc):
    nf = prob.n_floating
    n_c = prob.Jc.shape[0]
    d_fr, d_f = cp.Variable(n_c), cp.Variable(nf)
    qdd = qdd_cmd + np.concatenate([np.eye(nf), np.zeros((prob.A.shape[0] - nf, nf))]) @ d_f
    f_r = f_mpc + d_fr
    cons = [prob.A[:nf] @ qdd + prob.bias[:nf] == prob.Jc[:, :nf].T @ f_r, prob.W @ f_r >= prob.w0]
    obj = cp.quad_form(d_fr, prob.Q1) + cp.quad_form(d_f, prob.Q2)
    value = cp.Problem(cp.Minimize(obj), cons).solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return value


def test_consistent_command_needs_no_relaxation(biped, rng):
    q, qd = nominal_state(biped)
    prob, kin = _biped_problem(biped, q, qd)
    f_mpc = np.array([1.0, -2.0, 30.0, -1.5, 2.5, 25.0])
    qdd_cmd = rng.normal(size=biped.nv)
    # choose the base acceleration that the reference forces already produce
    nf = 6
    rhs = prob.Jc[:, :nf].T @ f_mpc - prob.bias[:nf] - prob.A[:nf, nf:] @ qdd_cmd[nf:]
    qdd_cmd[:nf] = np.linalg.solve(prob.A[:nf, :nf], rhs)
    sol = solve_wbc_qp(prob, qdd_cmd, f_mpc)
    assert np.abs(sol.delta_f).max() < 1e-9 and np.abs(sol.delta_fr).max() < 1e-9
    assert sol.objective < 1e-15


def test_static_double_stance_carries_the_weight(biped):
    q, qd = balanced_stance(biped)
    prob, kin = _biped_problem(biped, q, qd)
    weight = biped.total_mass * 9.81
    assert weight == pytest.approx(52.974)
    # reference forces that hold the robot still: solve the floating-base rows
    JfT = prob.Jc[:, :6].T
    f_mpc = np.linalg.lstsq(JfT, prob.bias[:6], rcond=None)[0]
    assert np.abs(JfT @ f_mpc - prob.bias[:6]).max() < 1e-9
    sol = solve_wbc_qp(prob, np.zeros(biped.nv), f_mpc)
    assert np.abs(sol.delta_f).max() < 1e-9
    assert sol.f_r[2::3].sum() == pytest.approx(weight, abs=1e-6)
    assert round(sol.f_r[2::3].sum(), 2) == 52.97


def test_relaxed_stance_keeps_vertical_momentum_balance(biped):
    q, qd = nominal_state(biped)
    prob, kin = _biped_problem(biped, q, qd)
    weight = biped.total_mass * 9.81
    sol = solve_wbc_qp(prob, np.zeros(biped.nv), np.array([0, 0, weight / 2, 0, 0, weight / 2]))
    com_acc = kin.com_jacobian() @ sol.qdd  # qd = 0, so there is no bias term
    assert sol.f_r[2::3].sum() == pytest.approx(weight + biped.total_mass * com_acc[2], abs=1e-6)


def test_qp_matches_dense_solver_and_constraints(biped, rng):
    for _ in range(10):
        q, qd = nominal_state(biped)
        q[7:] += rng.normal(scale=0.05, size=6)
        qd = rng.normal(scale=0.3, size=biped.nv)
        prob, _ = _biped_problem(biped, q, qd, Q1=float(rng.uniform(0.1, 10)), Q2=float(rng.uniform(1, 1000)))
        qdd_cmd = rng.normal(size=biped.nv)
        f_mpc = np.concatenate([rng.normal(scale=5, size=2), [rng.uniform(0, 40)], rng.normal(scale=5, size=2), [rng.uniform(0, 40)]])
        sol = solve_wbc_qp(prob, qdd_cmd, f_mpc)
        ref = _dense_reference(prob, qdd_cmd, f_mpc)
        assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-8)
        assert (prob.W @ sol.f_r - prob.w0).min() >= -1e-9
        residual = prob.A[:6] @ sol.qdd + prob.bias[:6] - prob.Jc[:, :6].T @ sol.f_r
        assert np.abs(residual).max() < 1e-6
        # torques reproduce the full equations of motion
        full = prob.A @ sol.qdd + prob.bias - prob.Jc.T @ sol.f_r
        assert np.allclose(full[6:], sol.tau, atol=1e-9)
        assert np.all(np.isfinite(sol.tau))


def test_qp_without_contacts_only_relaxes_the_base(biped, rng):
    q, qd = nominal_state(biped)
    prob, _ = _biped_problem(biped, q, qd, feet=())
    qdd_cmd = rng.normal(size=biped.nv)
    sol = solve_wbc_qp(prob, qdd_cmd, np.zeros(0))
    assert np.allclose(sol.qdd[6:], qdd_cmd[6:])
    assert np.abs(prob.A[:6] @ sol.qdd + prob.bias[:6]).max() < 1e-9


def test_infeasible_force_bounds_are_reported(biped):
    q, qd = nominal_state(biped)
    prob, _ = _biped_problem(biped, q, qd, feet=("l_foot",))
    W, w0 = contact_constraints(1, 0.7, fz_max=[5.0], fz_min=[10.0])
    prob.W, prob.w0 = W, w0
    with pytest.raises(WbcQpInfeasible):
        solve_wbc_qp(prob, np.zeros(biped.nv), np.array([0.0, 0.0, 7.0]))


def test_contact_constraints_describe_the_friction_pyramid():
    W, w0 = contact_constraints(1, 0.5, fz_max=[40.0])
    inside = np.array([0.4, -0.4, 1.0])
    outside = np.array([0.6, 0.0, 1.0])
    assert np.all(W @ inside >= w0)
    assert np.any(W @ outside < w0)
    assert np.any(W @ np.array([0, 0, 41.0]) < w0)
    assert np.any(W @ np.array([0, 0, -1.0]) < w0)


# -- APF baseline ------------------------------------------------------------------


def _witness(x):
    return WitnessPair(np.zeros(3), np.zeros(3), x, np.array([0.0, 1.0, 0.0]), np.zeros(1))


def test_apf_decays_with_distance():
    assert np.linalg.norm(apf_baseline_accel(_witness(1.0), ApfParams())) < 1e-30


def test_apf_at_contact_equals_gain_along_normal():
    p = ApfParams(k_p=12.0)
    assert np.allclose(apf_baseline_accel(_witness(0.0), p), [0.0, 12.0, 0.0])


def test_apf_ignores_velocity_while_rmp_does_not():
    x = 0.01
    apf = apf_rmp(x, ApfParams())
    assert np.array_equal(apf.metric, [[1.0]])
    p = CollisionRmpParams()
    approaching, leaving = collision_rmp(x, -0.5, p), collision_rmp(x, 0.5, p)
    assert approaching.vector[0] != leaving.vector[0]
    assert approaching.metric[0, 0] > leaving.metric[0, 0]
    assert math.isfinite(apf.vector[0])
