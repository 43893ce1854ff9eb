"""RMP algebra: natural/canonical motion policies, pushforward, pullback, resolve.

An RMP is a (force, metric) pair in natural form or an (acceleration, metric)
pair in canonical form; ``f = M a`` converts between them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import psd_pinv

PINV_RCOND = 1e-8


def metric_pinv(M):
    """Moore-Penrose inverse of a symmetric PSD matrix.

    Singular values below ``PINV_RCOND * sigma_max`` are treated as zero.
    """
    M = np.atleast_2d(M)
    if M.shape == (1, 1):
        m = float(M[0, 0])
        return np.array([[1.0 / m]]) if m > 1e-300 else np.zeros((1, 1))
    return psd_pinv(np.ascontiguousarray(M, dtype=float), PINV_RCOND)


@dataclass
class Rmp:
    vector: np.ndarray
    metric: np.ndarray
    form: str = "natural"

    def __post_init__(self):
        self.vector = np.atleast_1d(np.asarray(self.vector, dtype=float))
        self.metric = np.atleast_2d(np.asarray(self.metric, dtype=float))
        if self.form not in ("natural", "canonical"):
            raise ValueError(f"unknown RMP form '{self.form}'")
        n = self.vector.shape[0]
        if self.metric.shape != (n, n):
            raise ValueError(f"metric shape {self.metric.shape} does not match vector of size {n}")

    @classmethod
    def natural(cls, f, M):
        return cls(f, M, "natural")

    @classmethod
    def canonical(cls, a, M):
        return cls(a, M, "canonical")

    @property
    def dim(self):
        return self.vector.shape[0]

    @property
    def f(self):
        return self.to_natural().vector

    @property
    def a(self):
        return self.to_canonical().vector

    def to_natural(self):
        if self.form == "natural":
            return self
        return Rmp(self.metric @ self.vector, self.metric, "natural")

    def to_canonical(self):
        if self.form == "canonical":
            return self
        return resolve(self)

    def __add__(self, other):
        a = self.to_natural()
        b = other.to_natural()
        return Rmp(a.vector + b.vector, a.metric + b.metric, "natural")


@dataclass
class TaskValue:
    """Pushforward of the configuration state into a task space."""

    x: np.ndarray
    xd: np.ndarray
    J: np.ndarray
    Jdqd: np.ndarray


class TaskMap:
    """Maps a :class:`~rmpwbc.model.Kinematics` snapshot to a :class:`TaskValue`."""

    def evaluate(self, kin) -> TaskValue:
        raise NotImplementedError


class IdentityMap(TaskMap):
    def evaluate(self, kin):
        nv = kin.model.nv
        if kin.model.floating:
            raise ValueError("identity map needs matching q and qd charts (fixed-base model)")
        return TaskValue(kin.q.copy(), kin.qd.copy(), np.eye(nv), np.zeros(nv))


class PointMap(TaskMap):
    """World position of a named point frame."""

    def __init__(self, frame):
        self.frame = frame

    def evaluate(self, kin):
        body, offset = kin.model.frame(self.frame)
        if offset is None:
            offset = np.zeros(3)
        x = kin.point_position(body, offset)
        J = kin.point_jacobian(body, offset)
        xd = J @ kin.qd if kin.qd is not None else np.zeros(3)
        bias = kin.point_bias(body, offset) if kin.qd is not None else np.zeros(3)
        return TaskValue(x, xd, J, bias)


class CapsuleDistanceMap(TaskMap):
    """Signed surface distance between two capsules (one-dimensional)."""

    def __init__(self, capsule_i, capsule_j):
        self.capsule_i = capsule_i
        self.capsule_j = capsule_j

    def evaluate(self, kin):
        w = kin.capsule_witness(self.capsule_i, self.capsule_j)
        return TaskValue(np.array([w.distance]), np.array([w.rate]), w.jacobian_rel[None, :], np.array([w.bias]))


def pushforward(kin, task_map: TaskMap):
    """Task position and velocity ``(x, J qd)``."""
    val = task_map.evaluate(kin)
    return val.x, val.xd


def pullback(children):
    """Combine child RMPs into their parent space.

    ``children`` holds ``(rmp, J, Jdqd)`` triples; ``rmp`` may itself be a list
    of such triples, which is pulled back first (nested RMP-tree nodes).
    Returns the natural-form parent RMP ``(sum J^T (f - M Jdqd), sum J^T M J)``.
    """
    f_sum = None
    M_sum = None
    for child, J, Jdqd in children:
        if isinstance(child, (list, tuple)):
            child = pullback(child)
        child = child.to_natural()
        J = np.atleast_2d(np.asarray(J, dtype=float))
        if J.shape[0] != child.dim:
            raise ValueError(f"Jacobian has {J.shape[0]} rows but child RMP has dimension {child.dim}")
        if f_sum is None:
            f_sum = np.zeros(J.shape[1])
            M_sum = np.zeros((J.shape[1], J.shape[1]))
        elif J.shape[1] != f_sum.shape[0]:
            raise ValueError("children disagree on the parent dimension")
        MJ = child.metric @ J
        f_sum += J.T @ (child.vector - child.metric @ np.atleast_1d(Jdqd))
        M_sum += J.T @ MJ
    if f_sum is None:
        raise ValueError("pullback needs at least one child")
    return Rmp(f_sum, 0.5 * (M_sum + M_sum.T), "natural")


def resolve(rmp: Rmp) -> Rmp:
    """Canonical form ``(M^+ f, M)``."""
    if rmp.form == "canonical":
        return rmp
    return Rmp(metric_pinv(rmp.metric) @ rmp.vector, rmp.metric, "canonical")


@dataclass
class AttractorParams:
    kp: np.ndarray
    kd: np.ndarray
    x_des: np.ndarray
    xd_des: np.ndarray | None = None
    xdd_des: np.ndarray | None = None


def attractor_accel(x, xd, params: AttractorParams):
    a = np.asarray(params.kp) @ (params.x_des - x) if np.ndim(params.kp) == 2 else params.kp * (params.x_des - x)
    xd_des = np.zeros_like(xd) if params.xd_des is None else params.xd_des
    a = a + (np.asarray(params.kd) @ (xd_des - xd) if np.ndim(params.kd) == 2 else params.kd * (xd_des - xd))
    if params.xdd_des is not None:
        a = a + params.xdd_des
    return a


def attractor_rmp(x, xd, params: AttractorParams, metric) -> Rmp:
    """PD acceleration policy paired with the supplied metric (canonical form)."""
    return Rmp(attractor_accel(np.asarray(x, float), np.asarray(xd, float), params), metric, "canonical")


@dataclass
class CollisionRmpParams:
    k_p: float = 80.0
    k_d: float = 20.0
    l_p: float = 0.01
    l_d: float = 0.1
    l_m: float = 0.02
    v_d: float = 0.1
    eps_d: float = 0.1
    eps_m: float = 0.05
    mu: float = 1.0
    r: float = 0.08

    def __post_init__(self):
        for name in ("k_p", "k_d", "l_p", "l_d", "l_m", "v_d", "mu", "r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"collision RMP parameter {name} must be positive")
        for name in ("eps_d", "eps_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"collision RMP parameter {name} must be positive")


def velocity_gate(xd, v_d):
    """Logistic gate that is ~1 when approaching and ~0 when moving away."""
    u = xd / v_d
    if u > 0:
        e = math.exp(-u)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(u))


def distance_gate(x, r):
    """Quadratic activation that is 1 at contact and vanishes (with slope) at ``r``."""
    if x > r:
        return 0.0
    return x * x / (r * r) - 2.0 * x / r + 1.0


def collision_accel(x, xd, params: CollisionRmpParams):
    sig = velocity_gate(xd, params.v_d)
    return params.k_p * math.exp(-x / params.l_p) - params.k_d * sig * xd / (max(x, 0.0) / params.l_d + params.eps_d)


def collision_metric(x, xd, params: CollisionRmpParams):
    sig = velocity_gate(xd, params.v_d)
    return sig * distance_gate(x, params.r) * params.mu / (max(x, 0.0) / params.l_m + params.eps_m)


def collision_rmp(x, xd, params: CollisionRmpParams) -> Rmp:
    """One-dimensional repulsive RMP on a witness distance (canonical form)."""
    x = float(np.asarray(x).reshape(-1)[0])
    xd = float(np.asarray(xd).reshape(-1)[0])
    return Rmp(np.array([collision_accel(x, xd, params)]), np.array([[collision_metric(x, xd, params)]]), "canonical")
