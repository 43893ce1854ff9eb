"""Kinematic-tree rigid-body model.

Generalized coordinates for a floating root are ``q = [p (3), quat (4), joints]``
and ``qd = [omega_body (3), v_body (3), joint rates]``: the base twist is
expressed in the base frame, so ``qd`` lives in ``R^(6+n)`` and every Jacobian
is an ordinary matrix. A world-welded (``fixed``) root is also accepted, in
which case ``q`` and ``qd`` only hold joint coordinates.

All world-frame Jacobians returned here map ``qd`` to ``[omega; v]`` where
``v`` is the linear velocity of the frame origin (or point), both in world
coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ._kernels import (
    FIXED,
    FLOATING,
    REVOLUTE,
    capsule_axis_distance,
    capsule_pair,
    integrate_floating,
    tree_pass,
)
from .geometry import (
    TIE_BREAK_DIRECTION,
    cross,
    skew,
)

GRAVITY = np.array([0.0, 0.0, -9.81])
JOINT_TYPES = ("floating", "revolute", "fixed")


class ModelError(ValueError):
    """Raised for malformed model descriptions."""


@dataclass(frozen=True)
class BodySpec:
    name: str
    parent: str | None
    joint_type: str
    mass: float
    rotational_inertia: tuple = ((1e-3, 0, 0), (0, 1e-3, 0), (0, 0, 1e-3))
    com_offset: tuple = (0.0, 0.0, 0.0)
    joint_axis: tuple = (0.0, 0.0, 1.0)
    origin_xyz: tuple = (0.0, 0.0, 0.0)
    origin_rpy: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CapsuleSpec:
    name: str
    body_name: str
    endpoint_a: tuple
    endpoint_b: tuple
    radius: float


@dataclass(frozen=True)
class PointSpec:
    """A named point rigidly attached to a body (e.g. a point foot)."""

    name: str
    body_name: str
    offset: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ModelDescription:
    bodies: tuple
    capsules: tuple = ()
    points: tuple = ()
    actuated_joint_names: tuple | None = None
    gravity: tuple = tuple(GRAVITY)


@dataclass
class RobotState:
    q: np.ndarray
    qd: np.ndarray

    def copy(self):
        return RobotState(self.q.copy(), self.qd.copy())


@dataclass
class DynamicsTerms:
    A: np.ndarray
    bias: np.ndarray
    S_a: np.ndarray
    S_f: np.ndarray


@dataclass
class WitnessPair:
    point_a: np.ndarray
    point_b: np.ndarray
    distance: float
    normal: np.ndarray  # unit vector from capsule b towards capsule a
    jacobian_rel: np.ndarray
    rate: float = 0.0
    bias: float = 0.0


def _vec(value, size, what):
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ModelError(f"{what}: expected {size} values, got {arr.size}")
    return arr


def build_model(desc: ModelDescription) -> "RobotModel":
    """Validate ``desc`` and assign contiguous coordinate indices."""
    bodies = list(desc.bodies)
    if not bodies:
        raise ModelError("model has no bodies")
    by_name = {}
    for b in bodies:
        if b.name in by_name:
            raise ModelError(f"duplicate body name '{b.name}'")
        by_name[b.name] = b

    roots = [b for b in bodies if b.parent is None]
    if len(roots) != 1:
        raise ModelError(f"expected exactly one root body, found {len(roots)}")
    for b in bodies:
        if b.joint_type not in JOINT_TYPES:
            raise ModelError(f"body '{b.name}': unknown joint type '{b.joint_type}'")
        if b.parent is not None and b.parent not in by_name:
            raise ModelError(f"body '{b.name}': unknown parent '{b.parent}'")
        if b.parent is not None and b.joint_type == "floating":
            raise ModelError(f"body '{b.name}': only the root may have a floating joint")
        if b.mass <= 0:
            raise ModelError(f"body '{b.name}': mass must be positive")
        inertia = np.asarray(b.rotational_inertia, dtype=float)
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, atol=1e-12):
            raise ModelError(f"body '{b.name}': rotational inertia must be a symmetric 3x3")
        if np.linalg.eigvalsh(inertia).min() <= 0:
            raise ModelError(f"body '{b.name}': rotational inertia is not positive definite")
        if b.joint_type == "revolute":
            axis = _vec(b.joint_axis, 3, f"body '{b.name}' joint_axis")
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ModelError(f"body '{b.name}': joint axis is not unit norm")

    # every chain must reach the root without revisiting a body
    for b in bodies:
        seen = {b.name}
        cur = b
        while cur.parent is not None:
            if cur.parent in seen:
                raise ModelError(f"cycle detected through body '{cur.parent}'")
            seen.add(cur.parent)
            cur = by_name[cur.parent]

    children = {b.name: [] for b in bodies}
    for b in bodies:
        if b.parent is not None:
            children[b.parent].append(b.name)
    order = []
    stack = [roots[0].name]
    while stack:
        name = stack.pop(0)
        order.append(name)
        stack[:0] = children[name]
    return RobotModel(desc, [by_name[n] for n in order])


class RobotModel:
    """Immutable kinematic tree; all per-state queries take the state as input."""

    def __init__(self, desc, ordered_bodies):
        self.description = desc
        self.body_names = tuple(b.name for b in ordered_bodies)
        self.body_index = {n: i for i, n in enumerate(self.body_names)}
        nb = len(ordered_bodies)
        self.n_bodies = nb
        self.gravity = np.asarray(desc.gravity, dtype=float)
        self.floating = ordered_bodies[0].joint_type == "floating"

        self.parent = np.full(nb, -1, dtype=int)
        self.joint_type = []
        self.axis = np.zeros((nb, 3))
        self.R_tp = np.zeros((nb, 3, 3))
        self.p_tp = np.zeros((nb, 3))
        self.mass = np.zeros(nb)
        self.com = np.zeros((nb, 3))
        self.inertia = np.zeros((nb, 3, 3))
        self.q_index = np.full(nb, -1, dtype=int)
        self.v_index = np.full(nb, -1, dtype=int)
        self.joint_names = []
        codes = {"floating": FLOATING, "revolute": REVOLUTE, "fixed": FIXED}
        self.joint_code = np.array([codes[b.joint_type] for b in ordered_bodies], dtype=np.int64)

        nq = 7 if self.floating else 0
        nv = 6 if self.floating else 0
        for i, b in enumerate(ordered_bodies):
            self.parent[i] = -1 if b.parent is None else self.body_index[b.parent]
            self.joint_type.append(b.joint_type)
            self.axis[i] = _vec(b.joint_axis, 3, "joint_axis")
            self.R_tp[i] = Rotation.from_euler("xyz", _vec(b.origin_rpy, 3, "origin_rpy")).as_matrix()
            self.p_tp[i] = _vec(b.origin_xyz, 3, "origin_xyz")
            self.mass[i] = b.mass
            self.com[i] = _vec(b.com_offset, 3, "com_offset")
            self.inertia[i] = np.asarray(b.rotational_inertia, dtype=float)
            if b.joint_type == "revolute":
                self.q_index[i] = nq
                self.v_index[i] = nv
                self.joint_names.append(b.name)
                nq += 1
                nv += 1
        self.nq = nq
        self.nv = nv
        self.n_joints = nv - (6 if self.floating else 0)
        self.total_mass = float(self.mass.sum())

        joint_vidx = {n: int(self.v_index[self.body_index[n]]) for n in self.joint_names}
        actuated = desc.actuated_joint_names
        if actuated is None:
            actuated = tuple(self.joint_names)
        for n in actuated:
            if n not in joint_vidx:
                raise ModelError(f"actuated joint '{n}' is not a revolute joint of the model")
        self.actuated_joint_names = tuple(actuated)
        self.actuated_v_index = np.array([joint_vidx[n] for n in actuated], dtype=int)

        self.points = {}
        for pt in desc.points:
            if pt.body_name not in self.body_index:
                raise ModelError(f"point '{pt.name}': unknown body '{pt.body_name}'")
            if pt.name in self.points or pt.name in self.body_index:
                raise ModelError(f"duplicate frame name '{pt.name}'")
            self.points[pt.name] = (self.body_index[pt.body_name], _vec(pt.offset, 3, pt.name))

        self.capsules = []
        self.capsule_index = {}
        for cap in desc.capsules:
            if cap.body_name not in self.body_index:
                raise ModelError(f"capsule '{cap.name}': unknown body '{cap.body_name}'")
            if cap.radius <= 0:
                raise ModelError(f"capsule '{cap.name}': radius must be positive")
            self.capsule_index[cap.name] = len(self.capsules)
            self.capsules.append(
                (
                    self.body_index[cap.body_name],
                    _vec(cap.endpoint_a, 3, cap.name),
                    _vec(cap.endpoint_b, 3, cap.name),
                    float(cap.radius),
                )
            )

    # -- configuration helpers -------------------------------------------------

    def neutral_configuration(self):
        q = np.zeros(self.nq)
        if self.floating:
            q[3] = 1.0
        return q

    def joint_q_index(self, name):
        return int(self.q_index[self.body_index[name]])

    def joint_v_index(self, name):
        return int(self.v_index[self.body_index[name]])

    def selection_matrices(self):
        """``(S_a, S_f)``: actuated-joint and floating-base row selectors."""
        S_a = np.zeros((len(self.actuated_v_index), self.nv))
        S_a[np.arange(len(self.actuated_v_index)), self.actuated_v_index] = 1.0
        n_f = 6 if self.floating else 0
        S_f = np.zeros((n_f, self.nv))
        S_f[:, :n_f] = np.eye(n_f)
        return S_a, S_f

    def integrate(self, q, qd, dt):
        """Advance ``q`` by holding ``qd`` constant for ``dt`` (exact on the base)."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        if self.floating:
            return integrate_floating(q, qd, float(dt))
        return q + qd * dt

    def validate_state(self, q, qd=None):
        if q.shape != (self.nq,):
            raise ModelError(f"q has shape {q.shape}, expected ({self.nq},)")
        if qd is not None and qd.shape != (self.nv,):
            raise ModelError(f"qd has shape {qd.shape}, expected ({self.nv},)")
        if self.floating and abs(np.linalg.norm(q[3:7]) - 1.0) > 1e-9:
            raise ModelError("base quaternion is not unit norm")

    # -- kinematics ------------------------------------------------------------

    def kinematics(self, q, qd=None):
        return Kinematics(self, q, qd)

    def frame(self, name):
        """Resolve a frame name to ``(body_index, offset or None)``."""
        if name in self.points:
            return self.points[name]
        if name in self.body_index:
            return self.body_index[name], None
        raise KeyError(f"unknown frame '{name}'")

    # -- per-operation wrappers ------------------------------------------------

    def mass_matrix(self, q):
        return self.kinematics(q).mass_matrix()

    def bias_forces(self, q, qd):
        return self.kinematics(q, qd).bias_forces()

    def dynamics_terms(self, q, qd):
        kin = self.kinematics(q, qd)
        S_a, S_f = self.selection_matrices()
        return DynamicsTerms(kin.mass_matrix(), kin.bias_forces(), S_a, S_f)

    def frame_jacobian(self, q, frame, reference="local"):
        return self.kinematics(q).frame_jacobian(frame, reference)

    def jdot_qdot(self, q, qd, frame, reference="local"):
        return self.kinematics(q, qd).frame_bias(frame, reference)

    def capsule_witness(self, q, capsule_i, capsule_j, qd=None):
        return self.kinematics(q, qd).capsule_witness(capsule_i, capsule_j)


class Kinematics:
    """Forward kinematics, Jacobians and bias accelerations at one state.

    Built once per control tick and shared by every query at that state.
    """

    def __init__(self, model: RobotModel, q, qd=None):
        self.model = model
        self.q = q
        self.qd = qd
        has_vel = qd is not None
        out = tree_pass(
            model.parent,
            model.joint_code,
            model.axis,
            model.R_tp,
            model.p_tp,
            model.q_index,
            model.v_index,
            model.mass,
            model.com,
            model.inertia,
            model.gravity,
            np.asarray(q, dtype=float),
            np.asarray(qd, dtype=float) if has_vel else np.zeros(model.nv),
            has_vel,
        )
        self.R, self.p, self.Jw, self.Jv = out[0:4]
        if has_vel:
            self.w, self.v, self.dw, self.dv = out[4:8]
        self._com_terms = out[8:11]
        self._A = out[11]
        self._bias = out[12]

    # -- points ----------------------------------------------------------------

    def point_position(self, body, offset):
        return self.p[body] + self.R[body] @ offset

    def point_jacobian(self, body, offset):
        r = self.R[body] @ offset
        return self.Jv[body] - skew(r) @ self.Jw[body]

    def point_jacobian_world(self, body, world_point):
        return self.Jv[body] - skew(world_point - self.p[body]) @ self.Jw[body]

    def point_velocity_world(self, body, world_point):
        return self.v[body] + cross(self.w[body], world_point - self.p[body])

    def point_bias_world(self, body, world_point):
        """Acceleration of a material point when ``qdd = 0``."""
        r = world_point - self.p[body]
        w = self.w[body]
        return self.dv[body] + cross(self.dw[body], r) + cross(w, cross(w, r))

    def point_bias(self, body, offset):
        return self.point_bias_world(body, self.point_position(body, offset))

    # -- named frames ----------------------------------------------------------

    def frame_position(self, name):
        body, offset = self.model.frame(name)
        if offset is None:
            return self.p[body]
        return self.point_position(body, offset)

    def frame_jacobian(self, name, reference="local"):
        """Point frames give a 3-row world Jacobian, body frames a 6-row one."""
        body, offset = self.model.frame(name)
        if offset is not None:
            return self.point_jacobian(body, offset)
        J = np.vstack([self.Jw[body], self.Jv[body]])
        if reference == "local":
            Rt = self.R[body].T
            J = np.vstack([Rt @ J[:3], Rt @ J[3:]])
        return J

    def frame_bias(self, name, reference="local"):
        body, offset = self.model.frame(name)
        if offset is not None:
            return self.point_bias(body, offset)
        if reference == "local":
            Rt = self.R[body].T
            return np.concatenate(
                [Rt @ self.dw[body], Rt @ (self.dv[body] - cross(self.w[body], self.v[body]))]
            )
        return np.concatenate([self.dw[body], self.dv[body]])

    # -- dynamics --------------------------------------------------------------

    def _com(self):
        """World COM offsets, COM Jacobians and world inertias per body."""
        return self._com_terms

    def mass_matrix(self):
        """Sum of per-body kinetic-energy contributions, ``sum J^T M_k J``."""
        return self._A.copy()

    def bias_forces(self):
        """Coriolis, centrifugal and gravity terms (``b + g``).

        Newton-Euler wrench of every body at ``qdd = 0`` projected through its
        Jacobian. Without a velocity this is the gravity vector alone.
        """
        return self._bias.copy()

    def gravity_forces(self):
        _, Jc, _ = self._com()
        m = self.model
        return -np.einsum("kai,k,a->i", Jc, m.mass, m.gravity)

    def com_position(self):
        c, _, _ = self._com()
        return (self.model.mass[:, None] * (self.p + c)).sum(0) / self.model.total_mass

    def com_jacobian(self):
        _, Jc, _ = self._com()
        return np.einsum("k,kaj->aj", self.model.mass, Jc) / self.model.total_mass

    def com_velocity(self):
        return self.com_jacobian() @ self.qd

    def kinetic_energy(self):
        return 0.5 * self.qd @ self.mass_matrix() @ self.qd

    def potential_energy(self):
        return -self.model.total_mass * float(self.model.gravity @ self.com_position())

    # -- capsules --------------------------------------------------------------

    def capsule_axis(self, index):
        body, a, b, radius = self.model.capsules[index]
        return body, self.point_position(body, a), self.point_position(body, b), radius

    def capsule_witness(self, capsule_i, capsule_j):
        m = self.model
        ci = m.capsule_index[capsule_i] if isinstance(capsule_i, str) else capsule_i
        cj = m.capsule_index[capsule_j] if isinstance(capsule_j, str) else capsule_j
        body_a, a0, a1, ra = m.capsules[ci]
        body_b, b0, b1, rb = m.capsules[cj]
        has_vel = self.qd is not None
        # the tie-break follows the capsule order so a swap flips the normal
        tie = TIE_BREAK_DIRECTION if ci <= cj else -TIE_BREAK_DIRECTION
        ca, cb, d, n, J, rate, bias = capsule_pair(
            self.R, self.p, self.Jw, self.Jv,
            self.w if has_vel else self.p, self.v if has_vel else self.p,
            self.dw if has_vel else self.p, self.dv if has_vel else self.p,
            body_a, a0, a1, body_b, b0, b1, tie, has_vel,
        )
        pair = WitnessPair(ca - ra * n, cb + rb * n, d - ra - rb, n, J)
        if has_vel:
            pair.rate = rate
            pair.bias = bias
        return pair

    def capsule_distance(self, capsule_i, capsule_j):
        """Surface distance between two capsules (negative when they overlap)."""
        body_a, a0, a1, ra = self.model.capsules[capsule_i]
        body_b, b0, b1, rb = self.model.capsules[capsule_j]
        return capsule_axis_distance(self.R, self.p, body_a, a0, a1, body_b, b0, b1) - ra - rb


def mass_matrix(model: RobotModel, q):
    return model.mass_matrix(q)


def bias_forces(model: RobotModel, q, qd):
    return model.bias_forces(q, qd)


def frame_jacobian(model: RobotModel, q, frame, reference="local"):
    return model.frame_jacobian(q, frame, reference)


def jdot_qdot(model: RobotModel, q, qd, frame, reference="local"):
    return model.jdot_qdot(q, qd, frame, reference)


def capsule_witness(model: RobotModel, q, capsule_i, capsule_j, qd=None):
    return model.capsule_witness(q, capsule_i, capsule_j, qd)
