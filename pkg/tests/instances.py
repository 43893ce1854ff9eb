"""Random prioritized-control instances shared by unit and acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rmpwbc.rmp import Rmp, pullback
from rmpwbc.wbc import PriorityStack, TaskDef, final_accel, modified_pullback, project_tasks


def random_spd(rng, n):
    B = rng.normal(size=(n, n))
    return B @ B.T + 0.5 * n * np.eye(n)


def random_psd(rng, n, rank=None):
    rank = n if rank is None else rank
    B = rng.normal(size=(n, rank))
    return B @ B.T


@dataclass
class Instance:
    A: np.ndarray
    Jc: np.ndarray | None
    Jc_dqd: np.ndarray | None
    tasks: list
    leaves: list = field(default_factory=list)  # (M, J, Jdqd, a)

    @property
    def n(self):
        return self.A.shape[0]

    def constraints(self):
        """Stacked equality constraints ``C qdd = d`` of every prioritized level."""
        rows, rhs = [], []
        if self.Jc is not None:
            rows.append(self.Jc)
            rhs.append(-self.Jc_dqd)
        for t in self.tasks:
            rows.append(t.J)
            rhs.append(t.xdd_cmd - t.Jdqd)
        if not rows:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.vstack(rows), np.concatenate(rhs)

    def stack(self):
        return PriorityStack(self.Jc, self.Jc_dqd, list(self.tasks))


def random_instance(rng, n=None, n_leaves=None, n_levels=None, contact=None, rank_deficient_metrics=True):
    n = int(rng.integers(6, 13)) if n is None else n
    n_levels = int(rng.integers(0, 3)) if n_levels is None else n_levels
    n_leaves = int(rng.integers(1, 4)) if n_leaves is None else n_leaves
    contact = bool(rng.integers(0, 2)) if contact is None else contact
    A = random_spd(rng, n)
    used = 0
    Jc = Jc_dqd = None
    if contact:
        rows = 3 if n < 9 else int(rng.choice([3, 6]))
        Jc, Jc_dqd = rng.normal(size=(rows, n)), rng.normal(size=rows)
        used = rows
    tasks = []
    for level in range(n_levels):
        dim = int(rng.integers(1, 4))
        if used + dim > n - 2:
            break
        tasks.append(TaskDef(f"task{level}", rng.normal(size=(dim, n)), rng.normal(size=dim), rng.normal(size=dim)))
        used += dim
    leaves = []
    for _ in range(n_leaves):
        dim = int(rng.integers(1, 4))
        rank = int(rng.integers(1, dim + 1)) if rank_deficient_metrics else dim
        leaves.append((random_psd(rng, dim, rank), rng.normal(size=(dim, n)), rng.normal(size=dim), rng.normal(size=dim)))
    return Instance(A, Jc, Jc_dqd, tasks, leaves)


def leaf_triples(leaves):
    return [(Rmp.canonical(a, M), J, Jdqd) for M, J, Jdqd, a in leaves]


def run_pipeline(inst: Instance):
    """Projection, pullback, modified pullback and the final command."""
    Ainv = np.linalg.inv(inst.A)
    qdd_k, N_k = project_tasks(inst.stack(), Ainv)
    if not inst.leaves:
        return qdd_k, qdd_k, N_k
    root = pullback(leaf_triples(inst.leaves))
    M_rmp, f_rmp = modified_pullback(root, N_k, qdd_k)
    return final_accel(qdd_k, N_k, M_rmp, f_rmp), qdd_k, N_k
