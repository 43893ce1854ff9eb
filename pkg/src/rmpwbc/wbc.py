"""Prioritized whole-body control with RMPs executed in the task null space.

Pipeline per control tick::

    contact_accel -> project_tasks -> pullback (rmp) -> modified_pullback
        -> final_accel -> solve_wbc_qp -> torques
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import quadprog

from ._kernels import psd_pinv as _psd_pinv
from .rmp import Rmp

EIG_RCOND = 1e-8


class WbcQpInfeasible(RuntimeError):
    """The relaxation QP has no feasible point."""

    def __init__(self, message, violated_rows=()):
        super().__init__(message)
        self.violated_rows = tuple(violated_rows)


def psd_pinv(M):
    """Eigendecomposition pseudo-inverse, dropping eigenvalues below ``1e-8 lambda_max``."""
    if M.shape[0] == 1:
        m = float(M[0, 0])
        return np.array([[1.0 / m]]) if m > 1e-300 else np.zeros((1, 1))
    return _psd_pinv(np.ascontiguousarray(M, dtype=float), EIG_RCOND)


def operational_inertia(J, Ainv):
    """``Lambda = (J A^-1 J^T)^+``."""
    return psd_pinv(J @ Ainv @ J.T)


def dyn_pinv(J, A=None, Ainv=None):
    """Dynamically consistent pseudo-inverse ``A^-1 J^T Lambda``."""
    if Ainv is None:
        Ainv = np.linalg.inv(A)
    AJt = Ainv @ J.T
    return AJt @ psd_pinv(J @ AJt)


@dataclass
class TaskDef:
    """One prioritized task evaluated at the current state."""

    name: str
    J: np.ndarray
    Jdqd: np.ndarray
    xdd_cmd: np.ndarray


@dataclass
class PriorityLevel:
    name: str
    J_pre: np.ndarray
    qdd_cmd: np.ndarray
    N: np.ndarray
    rank: int
    full_rank: bool


@dataclass
class PriorityStack:
    """Contact constraint (level 0) followed by ordered tasks."""

    Jc: np.ndarray | None
    Jc_dqd: np.ndarray | None
    tasks: list = field(default_factory=list)
    levels: list = field(default_factory=list)


def _rank(J_pre, Ainv, J):
    """Rank of the projected task, relative to the scale of the unprojected one."""
    if J_pre.shape[0] == 0:
        return 0
    lam = np.linalg.eigvalsh(J_pre @ Ainv @ J_pre.T)
    scale = np.linalg.eigvalsh(J @ Ainv @ J.T)[-1]
    return int((lam > EIG_RCOND * max(scale, 1e-300)).sum())


def contact_accel(Ainv, Jc, Jc_dqd):
    """Level-0 command ``Jc_bar (-Jcdot qd)`` and its null-space projector ``N0``."""
    nv = Ainv.shape[0]
    if Jc is None or Jc.shape[0] == 0:
        return np.zeros(nv), np.eye(nv)
    Jc_bar = dyn_pinv(Jc, Ainv=Ainv)
    return Jc_bar @ (-Jc_dqd), np.eye(nv) - Jc_bar @ Jc


def project_tasks(stack: PriorityStack, Ainv, check_rank=False):
    """Run the recursion over ``stack.tasks``; returns ``(qdd_k, N_k)``.

    ``stack.levels`` is filled with per-level diagnostics. Rank checks cost an
    extra eigendecomposition per level and are opt-in.
    """
    qdd, N = contact_accel(Ainv, stack.Jc, stack.Jc_dqd)
    nv = Ainv.shape[0]
    stack.levels = [PriorityLevel("contact", stack.Jc if stack.Jc is not None else np.zeros((0, nv)), qdd, N, 0, True)]
    for task in stack.tasks:
        J_pre = task.J @ N
        J_bar = dyn_pinv(J_pre, Ainv=Ainv)
        qdd = qdd + J_bar @ (task.xdd_cmd - task.Jdqd - task.J @ qdd)
        N = N - (N @ J_bar) @ J_pre
        rank = _rank(J_pre, Ainv, task.J) if check_rank else task.J.shape[0]
        stack.levels.append(PriorityLevel(task.name, J_pre, qdd, N, rank, rank == task.J.shape[0]))
    return qdd, N


def modified_pullback(root_rmp: Rmp, N_k, qdd_k):
    """Project the configuration-space RMP into the null space of prior tasks.

    Returns ``(M_rmp, f_rmp) = (N^T M N, N^T (f - M qdd_k))``.
    """
    nat = root_rmp.to_natural()
    M = nat.metric
    MN = M @ N_k
    M_rmp = N_k.T @ MN
    f_rmp = N_k.T @ (nat.vector - M @ qdd_k)
    return 0.5 * (M_rmp + M_rmp.T), f_rmp


def final_accel(qdd_k, N_k, M_rmp, f_rmp):
    return qdd_k + N_k @ (psd_pinv(M_rmp) @ f_rmp)


def rmp_objective(qdd, leaves, qd=None):
    """Metric-weighted residual ``sum ||J qdd + Jdot qd - xdd||^2_M`` over canonical leaves.

    ``leaves`` holds ``(Rmp, J, Jdqd)`` triples.
    """
    total = 0.0
    for rmp, J, Jdqd in leaves:
        can = rmp.to_canonical() if rmp.form == "natural" else rmp
        r = J @ qdd + Jdqd - can.vector
        total += float(r @ can.metric @ r)
    return total


# -- relaxation QP -------------------------------------------------------------


def contact_constraints(n_contacts, mu, fz_max=None, fz_min=None):
    """Friction-pyramid rows ``W f >= w0`` for stacked ``[fx, fy, fz]`` forces.

    Each contact gets four pyramid faces, ``fz >= fz_min`` and, when given,
    ``fz <= fz_max``. ``fz_max``/``fz_min`` are per-contact sequences.
    """
    rows = []
    rhs = []
    for c in range(n_contacts):
        base = 3 * c
        for axis in (0, 1):
            for sign in (1.0, -1.0):
                row = np.zeros(3 * n_contacts)
                row[base + 2] = mu
                row[base + axis] = -sign
                rows.append(row)
                rhs.append(0.0)
        row = np.zeros(3 * n_contacts)
        row[base + 2] = 1.0
        rows.append(row)
        rhs.append(0.0 if fz_min is None else float(fz_min[c]))
        if fz_max is not None and fz_max[c] is not None and math.isfinite(fz_max[c]):
            row = np.zeros(3 * n_contacts)
            row[base + 2] = -1.0
            rows.append(row)
            rhs.append(-float(fz_max[c]))
    if not rows:
        return np.zeros((0, 3 * n_contacts)), np.zeros(0)
    return np.array(rows), np.array(rhs)


@dataclass
class WbcQpProblem:
    A: np.ndarray
    bias: np.ndarray
    Jc: np.ndarray  # (3 nc, nv)
    W: np.ndarray
    w0: np.ndarray
    Q1: np.ndarray  # reaction-force relaxation weight
    Q2: np.ndarray  # floating-base acceleration relaxation weight
    S_a: np.ndarray
    n_floating: int = 6


@dataclass
class WbcQpSolution:
    qdd: np.ndarray
    f_r: np.ndarray
    tau: np.ndarray
    delta_f: np.ndarray
    delta_fr: np.ndarray
    objective: float
    active: np.ndarray


def solve_wbc_qp(problem: WbcQpProblem, qdd_cmd, f_mpc):
    """Minimize force and floating-base relaxations subject to base dynamics.

    The floating-base rows of the equations of motion are solved for
    ``delta_f`` explicitly, which leaves a QP over ``delta_fr`` only.
    Torques follow from inverse dynamics with the optimal ``(qdd, f_r)``.
    """
    nf = problem.n_floating
    A, h, Jc = problem.A, problem.bias, problem.Jc
    nc3 = Jc.shape[0]
    A_ff = A[:nf, :nf]
    base_residual = -(A[:nf] @ qdd_cmd + h[:nf])
    if nc3 == 0:
        delta_f = np.linalg.solve(A_ff, base_residual)
        delta_fr = np.zeros(0)
        f_r = np.zeros(0)
        active = np.zeros(0, dtype=int)
    else:
        JfT = Jc[:, :nf].T
        sol = np.linalg.solve(A_ff, np.column_stack([base_residual + JfT @ f_mpc, JfT]))
        d0 = sol[:, 0]
        B = sol[:, 1:]
        Q2B = problem.Q2 @ B
        G = 2.0 * (problem.Q1 + B.T @ Q2B)
        G = 0.5 * (G + G.T)
        a = -2.0 * (Q2B.T @ d0)
        W = problem.W
        b = problem.w0 - W @ f_mpc
        if W.shape[0]:
            try:
                delta_fr, _, _, _, _, active = quadprog.solve_qp(G, a, W.T, b, 0)
            except ValueError as exc:
                raise WbcQpInfeasible(str(exc), np.nonzero(b > 0)[0]) from exc
            active = np.asarray(active, dtype=int) - 1
            active = active[active >= 0]
        else:
            delta_fr = np.linalg.solve(G, a)
            active = np.zeros(0, dtype=int)
        delta_f = d0 + B @ delta_fr
        f_r = f_mpc + delta_fr
    qdd = qdd_cmd.copy()
    qdd[:nf] += delta_f
    gen = A @ qdd + h
    if nc3:
        gen = gen - Jc.T @ f_r
    tau = problem.S_a @ gen
    obj = float(delta_fr @ problem.Q1 @ delta_fr + delta_f @ problem.Q2 @ delta_f)
    return WbcQpSolution(qdd, f_r, tau, delta_f, delta_fr, obj, active)


# -- APF baseline --------------------------------------------------------------


@dataclass
class ApfParams:
    k_p: float = 40.0
    l_p: float = 0.01
    metric: float = 1.0


def apf_baseline_accel(witness, params: ApfParams):
    """Position-only repulsion ``k_p exp(-x / l_p)`` along the witness normal."""
    return params.k_p * math.exp(-witness.distance / params.l_p) * witness.normal


def apf_rmp(x, params: ApfParams):
    """The APF repulsion as a one-dimensional leaf with a constant (identity) metric."""
    x = float(np.asarray(x).reshape(-1)[0])
    return Rmp(np.array([params.k_p * math.exp(-x / params.l_p)]), np.array([[params.metric]]), "canonical")
