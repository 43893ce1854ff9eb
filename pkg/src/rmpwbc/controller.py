"""Per-tick locomotion controller for the point-foot biped.

Each call to :meth:`WholeBodyController.compute` runs::

    gait FSM -> footstep / swing reference -> reaction-force plan
      -> contact + body tasks (null-space recursion)
      -> swing-leg RMP tree -> modified pullback -> relaxation QP -> torques
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import rotation_log, yaw_of
from .locomotion import (
    FEET,
    LEFT,
    RIGHT,
    GaitSchedule,
    StepRegion,
    SrbParams,
    SrbState,
    SwingTrajectory,
    TvrParams,
    lipm_rollout,
    other_foot,
    side_sign,
    srb_reaction_forces,
    static_force_split,
    step_offsets,
    tvr_plan,
)
from .rmp import AttractorParams, CollisionRmpParams, attractor_rmp, collision_rmp, pullback
from .wbc import (
    ApfParams,
    PriorityStack,
    TaskDef,
    WbcQpInfeasible,
    WbcQpProblem,
    apf_rmp,
    contact_constraints,
    final_accel,
    modified_pullback,
    operational_inertia,
    project_tasks,
    solve_wbc_qp,
)

# strategy -> (stepping-region mode, avoidance back-end)
STRATEGIES = {
    "proposed": ("proposed_extended", "rmp"),
    "baseline": ("baseline_restricted", "rmp"),
    "no_avoidance": ("proposed_extended", None),
    "apf": ("proposed_extended", "apf"),
}

FOOT_FRAME = {LEFT: "l_foot", RIGHT: "r_foot"}
LEG_CAPSULES = {LEFT: ("l_thigh", "l_shank"), RIGHT: ("r_thigh", "r_shank")}


@dataclass
class ControllerConfig:
    strategy: str = "proposed"
    stepping: bool = True
    period: float = 0.6
    dual_support: float = 0.024
    transition: float = 0.018
    swing_apex: float = 0.05
    touchdown_depth: float = 0.005
    base_height: float = 0.5
    kp_orientation: float = 150.0
    kd_orientation: float = 25.0
    kp_height: float = 150.0
    kd_height: float = 25.0
    kp_planar: float = 0.0
    kd_planar: float = 0.0
    kp_swing: float = 2000.0
    kd_swing: float = 90.0
    force_weight: float = 1.0
    base_weights: tuple = (100.0, 100.0, 100.0, 1.0, 1.0, 100.0)
    mu: float = 0.7
    fz_max: float = 150.0
    fz_min: float = 2.0
    crossing: float = 0.15
    min_gap: float = 0.05
    keepout_sagittal: float = 0.10
    sagittal_reach: float = 0.25
    lateral_reach: float = 0.35
    replan_period: float = 0.03
    torque_limit: float = 0.0
    tvr: TvrParams = field(default_factory=TvrParams)
    collision: CollisionRmpParams = field(default_factory=CollisionRmpParams)
    apf: ApfParams = field(default_factory=ApfParams)
    srb: SrbParams = field(default_factory=SrbParams)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}', expected one of {sorted(STRATEGIES)}")
        if self.mu <= 0 or self.fz_max <= 0:
            raise ValueError("friction coefficient and normal-force bound must be positive")

    def with_strategy(self, strategy):
        return dataclasses.replace(self, strategy=strategy)

    def region(self):
        mode, _ = STRATEGIES[self.strategy]
        kw = dict(sagittal_min=-self.sagittal_reach, sagittal_max=self.sagittal_reach, lateral_max=self.lateral_reach)
        if mode == "baseline_restricted":
            return StepRegion.baseline(self.min_gap, **kw)
        return StepRegion.extended(
            self.crossing, keepout_lateral=self.min_gap, keepout_sagittal=self.keepout_sagittal, **kw
        )

    @property
    def avoidance(self):
        return STRATEGIES[self.strategy][1]


@dataclass
class ControlOutput:
    tau: np.ndarray
    qdd: np.ndarray
    f_r: np.ndarray
    contacts: tuple
    phase: str
    qp_failed: bool = False


class WholeBodyController:
    """Stateful controller; one instance per simulated robot."""

    def __init__(self, model, config: ControllerConfig | None = None, debug_sink=None):
        self.model = model
        self.config = config or ControllerConfig()
        self.debug_sink = debug_sink
        c = self.config
        self.schedule = GaitSchedule(c.period, c.dual_support, c.transition)
        self.region = c.region()
        self.tvr = c.tvr.resolved(self.schedule.swing_duration)
        self.S_a, _ = model.selection_matrices()
        self.swing = None
        self.swing_foot = None
        self.swing_replanned = False
        self._side_hint = None
        self.footholds = []
        self.stance_pos = {}
        self.last_tau = np.zeros(len(model.actuated_v_index))
        self.qp_failures = 0
        self.consecutive_qp_failures = 0
        self._plan = None
        self._plan_time = -np.inf
        self._plan_contacts = None
        cap = model.capsule_index
        self._pairs = {
            foot: [
                (cap[sw], cap[st])
                for sw in LEG_CAPSULES[foot]
                for st in LEG_CAPSULES[other_foot(foot)]
                if sw in cap and st in cap
            ]
            for foot in FEET
        }

    # -- state helpers -----------------------------------------------------------

    def reset(self, kin, t=0.0):
        for foot in FEET:
            self.stance_pos[foot] = kin.frame_position(FOOT_FRAME[foot]).copy()
        self.swing = None
        self.swing_foot = None
        self._plan = None
        self._plan_time = -np.inf
        self.schedule.clock = t

    def gait_state(self, t):
        if not self.config.stepping:
            return self.schedule.state_at(0.5 * self.config.dual_support)
        return self.schedule.state_at(t)

    # -- footstep planning -------------------------------------------------------

    def _com_state(self, kin):
        return kin.com_position(), kin.com_velocity()

    def plan_step(self, kin, foot, t_remaining, side_hint=None):
        """TVR target for ``foot`` from the LIPM prediction at touchdown."""
        com, vel = self._com_state(kin)
        stance = self.stance_pos[other_foot(foot)]
        params = self.tvr
        pos, v = lipm_rollout(com[:2], vel[:2], stance[:2], params.omega, max(t_remaining, 0.0))
        yaw = yaw_of(kin.R[0])
        target = tvr_plan(np.r_[pos, 0.0], np.r_[v, 0.0], stance, params, foot, yaw, self.region, side_hint)
        target[2] = -self.config.touchdown_depth
        return target

    def _crossing_side(self, target, foot, kin):
        """Fore (+1) or aft (-1) of the stance foot for a crossing target, else ``None``."""
        sag, lat = step_offsets(target, self.stance_pos[other_foot(foot)], foot, yaw_of(kin.R[0]))
        if lat < self.region.keepout_lateral:
            return 1 if sag >= 0 else -1
        return None

    def _update_swing(self, t, kin, state):
        c = self.config
        foot = state.swing_foot
        if foot is None:
            if self.swing is not None:
                self.swing = None
                self.swing_foot = None
            return
        t0 = t - state.phase_time
        tf = t0 + state.phase_duration
        if self.swing is None or self.swing_foot != foot or abs(self.swing.t0 - t0) > 1e-9:
            p0 = kin.frame_position(FOOT_FRAME[foot]).copy()
            target = self.plan_step(kin, foot, tf - t + c.transition)
            self._side_hint = self._crossing_side(target, foot, kin)
            self.swing = SwingTrajectory(p0, target, t0, tf, c.swing_apex)
            self.swing_foot = foot
            self.swing_replanned = False
            self.footholds.append({"t": t, "foot": foot, "target": target.tolist(), "kind": "preliminary"})
        elif not self.swing_replanned and t >= self.swing.t_mid:
            # keep a crossing step on the side it started on
            target = self.plan_step(kin, foot, tf - t + c.transition, self._side_hint)
            self.swing.retarget(t, target)
            self.swing_replanned = True
            self.footholds.append({"t": t, "foot": foot, "target": target.tolist(), "kind": "mid_swing"})

    # -- reaction-force reference ------------------------------------------------

    def _future_foothold(self, foot, com):
        if self.swing is not None and self.swing_foot == foot:
            return self.swing.pf
        nominal = np.array([com[0], com[1] + side_sign(foot) * 0.5 * self.config.tvr.step_width, 0.0])
        return nominal

    def _reaction_plan(self, t, kin, contacts):
        c = self.config
        srb = c.srb
        com, vel = self._com_state(kin)
        R = kin.R[0]
        theta = rotation_log(R)
        state = SrbState(theta, com, kin.w[0].copy(), vel)
        schedule = []
        bounds = []
        for k in range(srb.horizon):
            gs = self.gait_state(t + k * srb.dt)
            feet_k = []
            hi_k = []
            for foot in gs.contacts:
                if foot in contacts and (k == 0 or foot != self.swing_foot):
                    feet_k.append(self.stance_pos[foot])
                else:
                    feet_k.append(self._future_foothold(foot, com))
                hi_k.append(gs.ramps[foot] * c.fz_max)
            schedule.append(feet_k)
            bounds.append(hi_k)
        z_ref = com[2] + (c.base_height - kin.p[0][2])
        yaw_des = 0.0
        x_ref = np.zeros((srb.horizon, 12))
        x_ref[:, 2] = yaw_des
        x_ref[:, 3] = com[0]
        x_ref[:, 4] = com[1]
        x_ref[:, 5] = z_ref
        plan = srb_reaction_forces(state, schedule, x_ref, srb, bounds)
        self._plan = (plan, tuple(self.gait_state(t + k * srb.dt).contacts for k in range(srb.horizon)))
        self._plan_time = t
        self._plan_contacts = tuple(contacts)

    def reference_forces(self, t, kin, contacts):
        c = self.config
        if (
            self._plan is None
            or t - self._plan_time >= c.replan_period - 1e-9
            or self._plan_contacts != tuple(contacts)
        ):
            self._reaction_plan(t, kin, contacts)
        plan, plan_contacts = self._plan
        k = min(int((t - self._plan_time) / c.srb.dt + 1e-9), len(plan) - 1)
        if tuple(plan_contacts[k]) != tuple(contacts):
            k = 0
        forces = plan[k]
        if forces.shape[0] != len(contacts):
            forces = static_force_split(kin.com_position(), [self.stance_pos[f] for f in contacts], self.model.total_mass)
        return forces.reshape(-1)

    # -- tasks ---------------------------------------------------------------------

    def body_tasks(self, kin, f_ref=None):
        """Orientation and position tasks on the floating base.

        The horizontal base acceleration follows the planned reaction forces
        ``f_ref`` (the base cannot accelerate sideways on its own), plus an
        optional PD term towards the stance midpoint.
        """
        c = self.config
        R = kin.R[0]
        yaw = yaw_of(R)
        cy, sy = math.cos(yaw), math.sin(yaw)
        R_des = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        # level the body and regulate heading to zero
        err = rotation_log(R_des @ R.T)
        err[2] = -yaw
        w = kin.w[0]
        ori_cmd = c.kp_orientation * err - c.kd_orientation * w
        p = kin.p[0]
        v = kin.v[0]
        mid = 0.5 * (self.stance_pos[LEFT] + self.stance_pos[RIGHT])
        pos_cmd = np.array(
            [
                c.kp_planar * (mid[0] - p[0]) - c.kd_planar * v[0],
                c.kp_planar * (mid[1] - p[1]) - c.kd_planar * v[1],
                c.kp_height * (c.base_height - p[2]) - c.kd_height * v[2],
            ]
        )
        if f_ref is not None and len(f_ref):
            pos_cmd[:2] += f_ref.reshape(-1, 3)[:, :2].sum(axis=0) / self.model.total_mass
        return [
            TaskDef("body_orientation", kin.Jw[0], kin.dw[0], ori_cmd),
            TaskDef("body_position", kin.Jv[0], kin.dv[0], pos_cmd),
        ]

    def swing_leaves(self, t, kin, Ainv):
        """Attractor plus avoidance leaves for the current swing leg."""
        c = self.config
        foot = self.swing_foot
        body, offset = self.model.frame(FOOT_FRAME[foot])
        x = kin.point_position(body, offset)
        J = kin.point_jacobian(body, offset)
        bias = kin.point_bias(body, offset)
        xd = J @ kin.qd
        x_des, xd_des, xdd_des = self.swing.evaluate(t)
        params = AttractorParams(c.kp_swing, c.kd_swing, x_des, xd_des, xdd_des)
        leaves = [(attractor_rmp(x, xd, params, operational_inertia(J, Ainv)), J, bias)]
        witnesses = []
        if c.avoidance is not None:
            for sw, st in self._pairs[foot]:
                # the collision metric vanishes beyond its activation distance
                if c.avoidance == "rmp" and kin.capsule_distance(sw, st) > c.collision.r:
                    continue
                wp = kin.capsule_witness(sw, st)
                witnesses.append(wp)
                if c.avoidance == "rmp":
                    rmp = collision_rmp(wp.distance, wp.rate, c.collision)
                    if rmp.metric[0, 0] <= 0.0:
                        continue
                else:
                    rmp = apf_rmp(wp.distance, c.apf)
                leaves.append((rmp, wp.jacobian_rel[None, :], np.array([wp.bias])))
        return leaves, witnesses

    # -- main entry ------------------------------------------------------------------

    def compute(self, t, kin) -> ControlOutput:
        c = self.config
        state = self.gait_state(t)
        contacts = state.contacts
        # stance positions follow the measured feet while they are loaded
        for foot in FEET:
            if foot in contacts and not (state.phase.endswith("land") and foot == _transition_foot(state.phase)):
                self.stance_pos[foot] = kin.frame_position(FOOT_FRAME[foot]).copy()
        if c.stepping:
            self._update_swing(t, kin, state)

        A = kin.mass_matrix()
        h = kin.bias_forces()
        Ainv = np.linalg.inv(A)
        Jc = np.vstack([kin.frame_jacobian(FOOT_FRAME[f]) for f in contacts])
        Jc_dqd = np.concatenate([kin.frame_bias(FOOT_FRAME[f]) for f in contacts])
        f_mpc = self.reference_forces(t, kin, contacts)
        stack = PriorityStack(Jc, Jc_dqd, self.body_tasks(kin, f_mpc))
        qdd_k, N_k = project_tasks(stack, Ainv)

        witnesses = []
        if state.swing_foot is not None and self.swing is not None:
            leaves, witnesses = self.swing_leaves(t, kin, Ainv)
            root = pullback(leaves)
            M_rmp, f_rmp = modified_pullback(root, N_k, qdd_k)
            qdd_cmd = final_accel(qdd_k, N_k, M_rmp, f_rmp)
        else:
            qdd_cmd = qdd_k

        n = len(contacts)
        hi = [state.ramps[f] * c.fz_max for f in contacts]
        lo = [state.ramps[f] * c.fz_min for f in contacts]
        W, w0 = contact_constraints(n, c.mu, hi, lo)
        problem = WbcQpProblem(
            A, h, Jc, W, w0, c.force_weight * np.eye(3 * n), np.diag(c.base_weights), self.S_a
        )
        failed = False
        try:
            sol = solve_wbc_qp(problem, qdd_cmd, f_mpc)
            tau = sol.tau
            if c.torque_limit > 0:
                tau = np.clip(tau, -c.torque_limit, c.torque_limit)
            qdd, f_r = sol.qdd, sol.f_r
            self.consecutive_qp_failures = 0
        except WbcQpInfeasible:
            failed = True
            self.qp_failures += 1
            self.consecutive_qp_failures += 1
            tau, qdd, f_r = self.last_tau.copy(), qdd_cmd, f_mpc
        if not np.all(np.isfinite(tau)):
            failed = True
            tau = self.last_tau.copy()
        self.last_tau = tau
        if self.debug_sink is not None:
            self._emit(t, state, stack, qdd_cmd, kin, Jc, Jc_dqd, witnesses, failed, sol if not failed else None)
        return ControlOutput(tau, qdd, f_r, contacts, state.phase, failed)

    def _emit(self, t, state, stack, qdd_cmd, kin, Jc, Jc_dqd, witnesses, failed, sol):
        record = {
            "t": round(t, 6),
            "phase": state.phase,
            "contacts": list(state.contacts),
            "contact_residual": float(np.abs(Jc @ qdd_cmd + Jc_dqd).max()),
            "task_residuals": {
                task.name: float(np.abs(task.J @ qdd_cmd + task.Jdqd - task.xdd_cmd).max()) for task in stack.tasks
            },
            "qp_failed": failed,
            "active": [] if sol is None else sol.active.tolist(),
            "min_clearance": min((w.distance for w in witnesses), default=None),
        }
        if sol is not None:
            record["qp_objective"] = sol.objective
        self.debug_sink.write(json.dumps(record) + "\n")


def _transition_foot(phase):
    if phase.endswith("lift") or phase.endswith("land"):
        return RIGHT if phase.startswith("right") else LEFT
    return None
