"""Penalty-contact simulation of the biped, push injection and trial execution."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .controller import LEG_CAPSULES, ControllerConfig, WholeBodyController
from .locomotion import LEFT, RIGHT, GaitSchedule

TIMING_TAGS = ("T1", "T2", "T3", "T4")
# ``trial_error`` marks a trial whose code raised; sweeps record it and move on.
FAILURE_CAUSES = ("none", "base_too_low", "self_collision", "controller_failure", "trial_error")


class SimulationError(RuntimeError):
    """The state became non-finite."""


@dataclass
class SimConfig:
    dt: float = 0.001
    stiffness: float = 1.0e4
    damping: float = 200.0
    tangential_stiffness: float = 1.0e4
    tangential_damping: float = 200.0
    friction: float = 0.7
    warmup_cycles: int = 2
    window: float = 3.0
    failure_height: float = 0.25
    initial_velocity_noise: float = 0.0
    max_qp_failures: int = 50

    def __post_init__(self):
        if not 0 < self.dt <= 1e-3:
            raise ValueError("integrator step must be in (0, 1 ms]")
        if self.stiffness <= 0 or self.damping <= 0:
            raise ValueError("contact stiffness and damping must be positive")


@dataclass
class DisturbanceSpec:
    magnitude: float
    angle: float  # rad, measured from +x towards +y
    timing: str = "T1"
    duration: float = 0.020

    def __post_init__(self):
        if not 10.0 - 1e-9 <= self.magnitude <= 100.0 + 1e-9:
            raise ValueError("push magnitude must lie in [10, 100] N")
        if self.timing not in TIMING_TAGS:
            raise ValueError(f"unknown timing tag '{self.timing}'")
        if self.duration <= 0:
            raise ValueError("push duration must be positive")

    @property
    def force(self):
        return np.array([self.magnitude * math.cos(self.angle), self.magnitude * math.sin(self.angle), 0.0])

    def mirrored(self):
        """Reflection through the sagittal plane, with swing timings exchanged."""
        swap = {"T1": "T3", "T2": "T4", "T3": "T1", "T4": "T2"}
        return DisturbanceSpec(self.magnitude, -self.angle, swap[self.timing], self.duration)


@dataclass
class TrialOutcome:
    success: bool
    failure_cause: str
    min_base_height: float
    min_clearance: float
    strategy: str
    timing: str
    magnitude: float
    angle: float
    seed: int = 0
    failure_time: float | None = None
    push_time: float | None = None
    qp_failures: int = 0
    steps: int = 0
    trial_id: str = ""

    def __post_init__(self):
        if self.failure_cause not in FAILURE_CAUSES:
            raise ValueError(f"unknown failure cause '{self.failure_cause}'")
        if (self.failure_cause == "none") != bool(self.success):
            raise ValueError("failure_cause must be 'none' exactly when the trial succeeded")

    @property
    def angle_deg(self):
        return math.degrees(self.angle)


@dataclass
class SimWorld:
    model: object
    q: np.ndarray
    qd: np.ndarray
    config: SimConfig = field(default_factory=SimConfig)
    t: float = 0.0
    anchors: dict = field(default_factory=dict)
    contact_forces: dict = field(default_factory=dict)

    def kinematics(self):
        return self.model.kinematics(self.q, self.qd)


def nominal_state(model, base_height=0.5, hip_flex=-0.585, knee=1.17):
    """Standing pose with both feet under the hips."""
    q = model.neutral_configuration()
    q[2] = base_height
    for side in "lr":
        q[model.joint_q_index(f"{side}_hip_flex")] = hip_flex
        q[model.joint_q_index(f"{side}_knee")] = knee
    return q, np.zeros(model.nv)


def _contact_candidates(world, kin):
    """Feet below the ground at this state with their explicit contact terms."""
    out = []
    for name, (body, offset) in world.model.points.items():
        pos = kin.point_position(body, offset)
        pen = -pos[2]
        if pen <= 0.0:
            world.anchors.pop(name, None)
            continue
        anchor = world.anchors.get(name)
        if anchor is None:
            anchor = pos[:2].copy()
        J = kin.point_jacobian(body, offset)
        out.append({"name": name, "pos": pos, "pen": pen, "anchor": anchor, "J": J, "slip": None})
    return out


def _contact_force(cfg, c, vel, dt):
    """Force at the end-of-step velocity ``vel`` under the linearized model."""
    fn = cfg.stiffness * (c["pen"] - 0.5 * dt * vel[2]) - cfg.damping * vel[2]
    if c["slip"] is not None:
        ft = c["slip"] * cfg.friction * max(fn, 0.0)
    else:
        drift = c["pos"][:2] + 0.5 * dt * vel[:2] - c["anchor"]
        ft = -cfg.tangential_stiffness * drift - cfg.tangential_damping * vel[:2]
    return np.array([ft[0], ft[1], fn])


def step_sim(world: SimWorld, tau, external_force=None):
    """Advance one step with a drift-kick-drift scheme.

    Positions move half a step with the old velocity, the dynamics are
    evaluated there, the velocity is updated and the second half-drift uses
    the new velocity. This is exact for constant acceleration and second
    order in general. Penalty contact forces are taken at the new velocity
    (linearly implicit), which keeps the stiff foot contact stable at 1 ms.
    Sticking contacts that leave the friction cone switch to sliding and
    contacts that would pull on the ground are released.
    """
    model = world.model
    cfg = world.config
    dt = cfg.dt
    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)):
        raise SimulationError(f"non-finite torque at t={world.t:.4f}")
    q_half = model.integrate(world.q, world.qd, 0.5 * dt)
    kin = model.kinematics(q_half, world.qd)
    A = kin.mass_matrix()
    gen = -kin.bias_forces()
    gen[model.actuated_v_index] += tau
    if external_force is not None and np.any(external_force):
        gen += kin.Jv[0].T @ np.asarray(external_force, dtype=float)
    rhs0 = A @ world.qd + dt * gen

    active = _contact_candidates(world, kin)
    kt = cfg.tangential_damping + 0.5 * dt * cfg.tangential_stiffness
    kn = cfg.damping + 0.5 * dt * cfg.stiffness
    qd_new = None
    for _ in range(2 * len(active) + 1):
        H = A.copy()
        rhs = rhs0.copy()
        for c in active:
            J = c["J"]
            if c["slip"] is None:
                D = np.array([kt, kt, kn])
                f0 = np.array([*(-cfg.tangential_stiffness * (c["pos"][:2] - c["anchor"])), cfg.stiffness * c["pen"]])
                H += dt * (J.T * D) @ J
                rhs += dt * (J.T @ f0)
            else:
                # normal force implicit, friction follows it along the slip direction
                n_row = J[2]
                t_dir = c["slip"] * cfg.friction
                Jf = J[2] + t_dir[0] * J[0] + t_dir[1] * J[1]
                H += dt * kn * np.outer(Jf, n_row)
                rhs += dt * cfg.stiffness * c["pen"] * Jf
        qd_new = np.linalg.solve(H, rhs)
        changed = False
        for c in list(active):
            vel = c["J"] @ qd_new
            f = _contact_force(cfg, c, vel, dt)
            if f[2] < 0.0:
                active.remove(c)
                world.anchors.pop(c["name"], None)
                changed = True
                break
            if c["slip"] is None:
                norm = math.hypot(f[0], f[1])
                if norm > cfg.friction * f[2] + 1e-12:
                    c["slip"] = f[:2] / norm
                    changed = True
                    break
        if not changed:
            break

    forces = {name: np.zeros(3) for name in model.points}
    for c in active:
        vel = c["J"] @ qd_new
        f = _contact_force(cfg, c, vel, dt)
        forces[c["name"]] = f
        p_end = c["pos"][:2] + 0.5 * dt * vel[:2]
        if c["slip"] is not None:
            # drag the anchor so the spring matches the sliding force
            spring = f[:2] + cfg.tangential_damping * vel[:2]
            world.anchors[c["name"]] = p_end + spring / cfg.tangential_stiffness
        else:
            world.anchors[c["name"]] = c["anchor"]
    q_new = model.integrate(q_half, qd_new, 0.5 * dt)
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
        raise SimulationError(f"non-finite state at t={world.t:.4f}")
    world.q = q_new
    world.qd = qd_new
    world.t += dt
    world.contact_forces = forces
    return world


def push_start_time(spec: DisturbanceSpec, schedule: GaitSchedule, warmup_cycles):
    return schedule.tag_time(spec.timing, warmup_cycles)


def apply_disturbance(world_or_time, spec: DisturbanceSpec, t_start):
    """World-frame push on the base: ``spec.force`` inside ``[t_start, t_start + duration)``."""
    t = world_or_time.t if isinstance(world_or_time, SimWorld) else float(world_or_time)
    if t_start - 1e-12 <= t < t_start + spec.duration - 1e-12:
        return spec.force
    return np.zeros(3)


def leg_clearance(model, kin):
    """Smallest surface distance between any left-leg and any right-leg capsule."""
    best = math.inf
    for ca in LEG_CAPSULES[LEFT]:
        ia = model.capsule_index.get(ca)
        if ia is None:
            continue
        for cb in LEG_CAPSULES[RIGHT]:
            ib = model.capsule_index.get(cb)
            if ib is not None:
                best = min(best, kin.capsule_distance(ia, ib))
    return best


def detect_failure(base_height, clearance, failure_height=0.25):
    """Failure cause for one sampled instant, or ``"none"``."""
    if base_height < failure_height:
        return "base_too_low"
    if clearance < 0.0:
        return "self_collision"
    return "none"


class Rollout:
    """Closed-loop simulation state plus the failure monitors.

    A rollout can be deep-copied (see :meth:`fork`) so that several trials
    branch from one shared warm-up without changing any result.
    """

    def __init__(self, model, controller_config: ControllerConfig, sim_config: SimConfig | None = None, seed=0):
        self.model = model
        self.controller_config = controller_config
        self.config = cfg = sim_config or SimConfig()
        self.seed = seed
        q, qd = nominal_state(model, controller_config.base_height)
        if cfg.initial_velocity_noise > 0:
            rng = np.random.default_rng(seed)
            qd[3:5] += rng.normal(scale=cfg.initial_velocity_noise, size=2)
        self.world = SimWorld(model, q, qd, cfg)
        self.controller = WholeBodyController(model, controller_config)
        self.controller.reset(self.world.kinematics(), 0.0)
        self.min_height = math.inf
        self.min_clear = math.inf
        self.cause = "none"
        self.fail_time = None
        self.last_phase = None
        self.steps = 0

    @property
    def t(self):
        return self.world.t

    def fork(self):
        return copy.deepcopy(self, memo={id(self.model): self.model})

    def tick(self, force=None, dump=None):
        """Monitor the current state, then control and integrate one step.

        Returns ``False`` once a failure has been detected.
        """
        world, controller, cfg = self.world, self.controller, self.config
        kin = world.kinematics()
        height = float(kin.p[0][2])
        clear = leg_clearance(self.model, kin)
        self.min_height = min(self.min_height, height)
        self.min_clear = min(self.min_clear, clear)
        cause = detect_failure(height, clear, cfg.failure_height)
        if cause != "none":
            return self._fail(cause)
        out = controller.compute(world.t, kin)
        if out.phase != self.last_phase and out.phase in ("right_swing", "left_swing"):
            self.steps += 1
        self.last_phase = out.phase
        if controller.consecutive_qp_failures > cfg.max_qp_failures:
            return self._fail("controller_failure")
        try:
            step_sim(world, out.tau, force)
        except SimulationError:
            return self._fail("controller_failure")
        if dump is not None:
            dump.write(
                json.dumps(
                    {
                        "t": round(world.t, 6),
                        "q": world.q.tolist(),
                        "qd": world.qd.tolist(),
                        "contact_forces": {k: v.tolist() for k, v in world.contact_forces.items()},
                        "clearance": clear,
                        "phase": out.phase,
                    }
                )
                + "\n"
            )
        return True

    def _fail(self, cause):
        self.cause = cause
        self.fail_time = self.world.t
        return False

    def run_until(self, t_end, disturbance=None, t_push=None, dump=None):
        """Step while ``t < t_end`` and nothing has failed."""
        n = int(round((t_end - self.world.t) / self.config.dt))
        for _ in range(max(n, 0)):
            if self.cause != "none":
                break
            force = apply_disturbance(self.world.t, disturbance, t_push) if disturbance is not None else None
            if not self.tick(force, dump):
                break
        return self.cause

    def outcome(self, disturbance=None, t_push=None):
        return TrialOutcome(
            success=self.cause == "none",
            failure_cause=self.cause,
            min_base_height=self.min_height,
            min_clearance=self.min_clear,
            strategy=self.controller_config.strategy,
            timing=disturbance.timing if disturbance is not None else "",
            magnitude=disturbance.magnitude if disturbance is not None else 0.0,
            angle=disturbance.angle if disturbance is not None else 0.0,
            seed=self.seed,
            failure_time=self.fail_time,
            push_time=t_push,
            qp_failures=self.controller.qp_failures,
            steps=self.steps,
        )


def trial_push_time(controller_config: ControllerConfig, disturbance: DisturbanceSpec, sim_config: SimConfig | None = None):
    cfg = sim_config or SimConfig()
    c = controller_config
    return push_start_time(disturbance, GaitSchedule(c.period, c.dual_support, c.transition), cfg.warmup_cycles)


def warm_starts(model, controller_config, push_times, sim_config: SimConfig | None = None):
    """Undisturbed rollouts forked at each of ``push_times``.

    Only valid when the start state does not depend on the seed, i.e. with
    zero initial velocity noise.
    """
    cfg = sim_config or SimConfig()
    if cfg.initial_velocity_noise > 0:
        raise ValueError("warm starts need a seed-independent initial state")
    rollout = Rollout(model, controller_config, cfg)
    out = {}
    for t_push in sorted(set(push_times)):
        rollout.run_until(t_push)
        out[t_push] = rollout.fork()
    return out


def run_trial(
    model,
    controller_config: ControllerConfig,
    disturbance: DisturbanceSpec | None,
    seed=0,
    sim_config: SimConfig | None = None,
    duration=None,
    dump=None,
    debug_sink=None,
    warm_start: Rollout | None = None,
):
    """Warm up, push at the tagged instant and watch the following window.

    Without a disturbance the robot simply steps for ``duration`` seconds
    (default: warm-up plus window). ``dump`` receives one JSON line per
    step with the state, contact forces and leg clearance. ``warm_start``
    is a rollout from :func:`warm_starts` taken at this trial's push time;
    it is copied, and the result is identical to a run from scratch.
    """
    cfg = sim_config or SimConfig()
    if warm_start is not None:
        rollout = warm_start.fork()
        rollout.seed = seed
    else:
        rollout = Rollout(model, controller_config, cfg, seed)
    rollout.controller.debug_sink = debug_sink

    if disturbance is not None:
        t_push = trial_push_time(controller_config, disturbance, cfg)
        if warm_start is not None and warm_start.t > t_push + 1e-9:
            raise ValueError("warm start lies beyond the push time")
        t_end = t_push + disturbance.duration + cfg.window
    else:
        t_push = None
        t_end = duration if duration is not None else cfg.warmup_cycles * controller_config.period + cfg.window
    rollout.run_until(t_end, disturbance, t_push, dump)
    out = rollout.outcome(disturbance, t_push)
    rollout.controller.debug_sink = None
    return out


def outcome_record(outcome: TrialOutcome):
    return asdict(outcome)
