import math

import numpy as np
import pytest
from conftest import random_configuration
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import TreeOracle, sampled_segment_distance

from rmpwbc.model import BodySpec, CapsuleSpec, ModelDescription, ModelError, PointSpec, build_model

INERTIA = ((0.02, 0, 0), (0, 0.03, 0), (0, 0, 0.04))


def free_body(mass=2.0, gravity=(0.0, 0.0, -9.81), com=(0.0, 0.0, 0.0)):
    return build_model(ModelDescription((BodySpec("base", None, "floating", mass, INERTIA, com),), gravity=gravity))


def two_link(l1=0.3, l2=0.2):
    bodies = (
        BodySpec("root", None, "fixed", 1.0),
        BodySpec("upper", "root", "revolute", 1.0, joint_axis=(0, 1, 0)),
        BodySpec("lower", "upper", "revolute", 0.5, joint_axis=(0, 1, 0), origin_xyz=(l1, 0, 0)),
    )
    return build_model(ModelDescription(bodies, points=(PointSpec("tip", "lower", (l2, 0, 0)),)))


# -- construction ----------------------------------------------------------------


def test_single_floating_body_has_six_dofs():
    m = free_body()
    assert (m.nq, m.nv) == (7, 6)


def test_biped_dimensions(biped):
    assert biped.nv == 12
    assert biped.nq == 13
    assert len(biped.actuated_joint_names) == 6
    S_a, S_f = biped.selection_matrices()
    assert np.array_equal(S_a @ S_a.T, np.eye(6))
    assert np.array_equal(S_f[:, :6], np.eye(6))


@pytest.mark.parametrize(
    "bodies, message",
    [
        ((BodySpec("base", None, "floating", 1.0), BodySpec("loop", "loop", "revolute", 1.0)), "cycle"),
        ((BodySpec("base", None, "floating", 1.0), BodySpec("base", "base", "revolute", 1.0)), "duplicate"),
        ((BodySpec("base", None, "floating", 1.0), BodySpec("leg", "base", "revolute", 1.0, joint_axis=(1, 1, 0))), "unit"),
        ((BodySpec("a", None, "floating", 1.0), BodySpec("b", None, "floating", 1.0)), "root"),
        ((BodySpec("base", None, "floating", 1.0), BodySpec("leg", "base", "floating", 1.0)), "floating"),
        ((BodySpec("base", None, "floating", 0.0),), "mass"),
        ((BodySpec("base", None, "floating", 1.0, ((1, 0, 0), (0, -1, 0), (0, 0, 1))),), "positive definite"),
    ],
)
def test_malformed_descriptions_are_rejected(bodies, message):
    with pytest.raises(ModelError, match=message):
        build_model(ModelDescription(bodies))


def test_cycle_between_two_bodies_is_rejected():
    bodies = (
        BodySpec("base", None, "floating", 1.0),
        BodySpec("a", "b", "revolute", 1.0),
        BodySpec("b", "a", "revolute", 1.0),
    )
    with pytest.raises(ModelError, match="cycle"):
        build_model(ModelDescription(bodies))


def test_capsule_with_nonpositive_radius_is_rejected():
    desc = ModelDescription((BodySpec("base", None, "floating", 1.0),), capsules=(CapsuleSpec("c", "base", (0, 0, 0), (0, 0, 1), 0.0),))
    with pytest.raises(ModelError, match="radius"):
        build_model(desc)


# -- mass matrix -----------------------------------------------------------------


def test_free_body_translational_block_is_mass_times_identity():
    m = free_body(mass=2.5)
    A = m.mass_matrix(m.neutral_configuration())
    assert np.allclose(A[3:, 3:], 2.5 * np.eye(3), atol=1e-14)
    assert np.allclose(A[:3, :3], np.array(INERTIA), atol=1e-14)


def test_biped_mass_matrix_matches_kinetic_energy_oracle(biped, rng):
    oracle = TreeOracle(biped.description)
    for q in (biped.neutral_configuration(), random_configuration(biped, rng)):
        A = biped.mass_matrix(q)
        ref = oracle.mass_matrix(q)
        assert np.abs(A - ref).max() <= 1e-6 * np.abs(ref).max()


def test_mass_matrix_symmetric_positive_definite(biped, rng):
    for _ in range(50):
        A = biped.mass_matrix(random_configuration(biped, rng, joint_range=math.pi))
        assert np.abs(A - A.T).max() < 1e-10
        np.linalg.cholesky(A)


# -- bias forces -----------------------------------------------------------------


def test_bias_is_zero_at_rest_without_gravity():
    m = free_body(gravity=(0.0, 0.0, 0.0))
    assert np.array_equal(m.bias_forces(m.neutral_configuration(), np.zeros(6)), np.zeros(6))


def test_bias_of_resting_body_is_its_weight():
    m = free_body(mass=2.0)
    b = m.bias_forces(m.neutral_configuration(), np.zeros(6))
    assert np.allclose(b, [0, 0, 0, 0, 0, 2.0 * 9.81], atol=1e-12)


def test_bias_forces_match_newton_euler_oracle(biped, rng):
    oracle = TreeOracle(biped.description)
    q = random_configuration(biped, rng)
    qd = rng.normal(size=biped.nv)
    b = biped.bias_forces(q, qd)
    assert np.abs(b - oracle.bias_forces(q, qd)).max() < 1e-5


def test_gravity_only_bias_equals_gravity_forces(biped, rng):
    q = random_configuration(biped, rng)
    kin = biped.kinematics(q, np.zeros(biped.nv))
    assert np.allclose(kin.bias_forces(), kin.gravity_forces(), atol=1e-12)


# -- Jacobians -------------------------------------------------------------------


def test_base_frame_jacobian_is_identity_on_the_twist():
    m = free_body()
    q = m.neutral_configuration()
    q[3:7] = [math.cos(0.2), 0.0, math.sin(0.2), 0.0]
    assert np.allclose(m.frame_jacobian(q, "base"), np.eye(6), atol=1e-14)


def test_frame_welded_to_world_has_zero_jacobian():
    desc = ModelDescription(
        (
            BodySpec("world", None, "fixed", 1.0),
            BodySpec("plate", "world", "fixed", 1.0, origin_xyz=(0.1, 0, 0)),
            BodySpec("arm", "world", "revolute", 1.0),
        ),
        points=(PointSpec("mark", "plate", (0.0, 0.2, 0.0)),),
    )
    m = build_model(desc)
    q = np.array([0.7])
    assert np.array_equal(m.frame_jacobian(q, "mark"), np.zeros((3, 1)))
    assert np.array_equal(m.frame_jacobian(q, "plate"), np.zeros((6, 1)))


def test_unknown_frame_raises(biped):
    with pytest.raises(KeyError):
        biped.frame_jacobian(biped.neutral_configuration(), "nose")


def test_foot_jacobians_match_finite_differences(biped, rng):
    oracle = TreeOracle(biped.description)
    for _ in range(20):
        q = random_configuration(biped, rng)
        for frame in ("l_foot", "r_foot"):
            assert np.abs(biped.frame_jacobian(q, frame) - oracle.point_jacobian(q, frame)).max() < 1e-6


# -- Jacobian derivative times velocity ---------------------------------------------


def test_jdot_qdot_vanishes_at_rest(biped, rng):
    q = random_configuration(biped, rng)
    assert np.allclose(biped.jdot_qdot(q, np.zeros(biped.nv), "l_foot"), 0.0, atol=1e-15)


def test_jdot_qdot_two_link_centripetal_term():
    l1, l2 = 0.3, 0.2
    m = two_link(l1, l2)
    q = np.array([0.4, -0.9])
    qd = np.array([1.3, -0.6])
    c1, s1 = math.cos(q[0]), math.sin(q[0])
    c12, s12 = math.cos(q.sum()), math.sin(q.sum())
    w1, w12 = qd[0] ** 2, qd.sum() ** 2
    expected = np.array([-l1 * c1 * w1 - l2 * c12 * w12, 0.0, l1 * s1 * w1 + l2 * s12 * w12])
    assert np.allclose(m.jdot_qdot(q, qd, "tip"), expected, atol=1e-8)


def test_jdot_qdot_matches_finite_differences(biped, rng):
    oracle = TreeOracle(biped.description)
    q = random_configuration(biped, rng)
    qd = rng.normal(size=biped.nv)
    for frame in ("l_foot", "r_foot"):
        assert np.abs(biped.jdot_qdot(q, qd, frame) - oracle.point_bias(q, qd, frame)).max() < 1e-4


# -- capsules --------------------------------------------------------------------


def capsule_pair_model(a0, a1, b0, b1, ra=0.015, rb=0.015):
    desc = ModelDescription(
        (BodySpec("world", None, "fixed", 1.0), BodySpec("other", "world", "fixed", 1.0)),
        capsules=(CapsuleSpec("a", "world", tuple(a0), tuple(a1), ra), CapsuleSpec("b", "other", tuple(b0), tuple(b1), rb)),
    )
    return build_model(desc)


def test_parallel_vertical_capsules_distance():
    m = capsule_pair_model((0, 0, 0), (0, 0, 0.3), (0.1, 0, 0), (0.1, 0, 0.3))
    w = m.capsule_witness(np.zeros(0), "a", "b")
    assert w.distance == pytest.approx(0.07, abs=1e-15)
    # overlapping parallel axes: the witness sits at the middle of the overlap
    assert w.point_a[2] == pytest.approx(0.15)
    assert np.allclose(w.normal, [-1, 0, 0])


def test_coincident_points_use_tie_break_direction():
    m = capsule_pair_model((0.2, 0, 0), (0.2, 0, 0), (0.2, 0, 0), (0.2, 0, 0), ra=0.01, rb=0.02)
    w = m.capsule_witness(np.zeros(0), "a", "b")
    assert w.distance == pytest.approx(-0.03)
    assert np.allclose(w.normal, [0, 1, 0])


def test_sub_micron_segment_is_still_projected():
    m = capsule_pair_model((0, 0, 6e-8), (0, 0, 0), (0, 0, 0), (0, 0, 0), ra=0.03, rb=0.03)
    assert m.capsule_witness(np.zeros(0), "a", "b").distance == pytest.approx(-0.06, abs=1e-15)
    assert m.capsule_witness(np.zeros(0), "b", "a").distance == pytest.approx(-0.06, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=12, max_size=12), st.floats(0.005, 0.05), st.floats(0.005, 0.05))
def test_capsule_distance_matches_sampling_and_is_symmetric(coords, ra, rb):
    p = np.array(coords).reshape(4, 3)
    m = capsule_pair_model(p[0], p[1], p[2], p[3], ra, rb)
    w_ab = m.capsule_witness(np.zeros(0), "a", "b")
    w_ba = m.capsule_witness(np.zeros(0), "b", "a")
    ref = sampled_segment_distance(p[0], p[1], p[2], p[3], 2000) - ra - rb
    assert w_ab.distance <= ref + 1e-12
    assert w_ab.distance == pytest.approx(ref, abs=2e-3)
    assert w_ab.distance == pytest.approx(w_ba.distance, abs=1e-12)
    assert np.allclose(w_ab.point_a, w_ba.point_b, atol=1e-9)
    assert np.allclose(w_ab.point_b, w_ba.point_a, atol=1e-9)
    # witness points are separated by the surface distance along the normal
    assert np.linalg.norm(w_ab.point_a - w_ab.point_b) == pytest.approx(abs(w_ab.distance), abs=1e-9)


def test_witness_jacobian_predicts_distance_rate(biped, rng):
    q = random_configuration(biped, rng, 0.4)
    qd = rng.normal(size=biped.nv)
    eps = 1e-6
    w = biped.capsule_witness(q, "l_shank", "r_shank", qd)
    dp = biped.capsule_witness(biped.integrate(q, qd, eps), "l_shank", "r_shank").distance
    dm = biped.capsule_witness(biped.integrate(q, qd, -eps), "l_shank", "r_shank").distance
    assert w.jacobian_rel @ qd == pytest.approx((dp - dm) / (2 * eps), abs=1e-6)
    assert w.rate == pytest.approx(w.jacobian_rel @ qd, abs=1e-12)


# -- state handling --------------------------------------------------------------


def test_integration_keeps_quaternion_normalized(biped, rng):
    q = random_configuration(biped, rng)
    for _ in range(100):
        q = biped.integrate(q, rng.normal(size=biped.nv) * 5, 0.01)
    assert abs(np.linalg.norm(q[3:7]) - 1) < 1e-12
    biped.validate_state(q)


def test_validate_state_rejects_bad_quaternion(biped):
    q = biped.neutral_configuration()
    q[3] = 2.0
    with pytest.raises(ModelError):
        biped.validate_state(q)
