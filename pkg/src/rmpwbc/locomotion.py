"""Gait timing, foot placement and reaction-force references for a point-foot biped."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import quadprog

LEFT = "left"
RIGHT = "right"
FEET = (LEFT, RIGHT)

PHASES = (
    "dual_support_1",
    "right_lift",
    "right_swing",
    "right_land",
    "dual_support_2",
    "left_lift",
    "left_swing",
    "left_land",
)
SWING_FOOT = {"right_swing": RIGHT, "left_swing": LEFT}
_TRANSITION_FOOT = {"right_lift": RIGHT, "right_land": RIGHT, "left_lift": LEFT, "left_land": LEFT}


def side_sign(foot):
    return 1.0 if foot == LEFT else -1.0


def other_foot(foot):
    return RIGHT if foot == LEFT else LEFT


# -- gait finite-state machine -----------------------------------------------------


@dataclass
class GaitState:
    phase: str
    contacts: tuple
    ramps: dict
    phase_time: float
    phase_duration: float

    @property
    def swing_foot(self):
        return SWING_FOOT.get(self.phase)

    @property
    def progress(self):
        return self.phase_time / self.phase_duration


@dataclass
class GaitSchedule:
    """Time-scripted gait: two swings, two dual supports, four transitions.

    Each half cycle runs dual support, a lift transition (the upcoming swing
    foot unloads), swing, then a landing transition (the foot reloads).
    """

    period: float = 0.6
    dual_support: float = 0.024
    transition: float = 0.018
    clock: float = 0.0

    def __post_init__(self):
        if self.swing_duration <= 0 or self.dual_support <= 0 or self.transition <= 0:
            raise ValueError("gait phase durations must be positive")

    @property
    def swing_duration(self):
        return 0.5 * self.period - self.dual_support - 2.0 * self.transition

    @property
    def durations(self):
        half = (self.dual_support, self.transition, self.swing_duration, self.transition)
        return half + half

    def phase_start(self, phase):
        i = PHASES.index(phase)
        return sum(self.durations[:i])

    def state_at(self, t):
        tau = math.fmod(t, self.period)
        if tau < 0:
            tau += self.period
        if self.period - tau < 1e-9:
            tau = 0.0
        start = 0.0
        for name, dur in zip(PHASES, self.durations):
            if tau < start + dur - 1e-9 or name == PHASES[-1]:
                return self._state(name, tau - start, dur)
            start += dur
        raise AssertionError("unreachable")

    def _state(self, phase, phase_time, dur):
        s = min(max(phase_time / dur, 0.0), 1.0)
        ramps = {LEFT: 1.0, RIGHT: 1.0}
        if phase in SWING_FOOT:
            contacts = (other_foot(SWING_FOOT[phase]),)
            ramps[SWING_FOOT[phase]] = 0.0
        else:
            contacts = FEET
            foot = _TRANSITION_FOOT.get(phase)
            if foot is not None:
                ramps[foot] = 1.0 - s if phase.endswith("lift") else s
        return GaitState(phase, contacts, ramps, phase_time, dur)

    def current(self):
        return self.state_at(self.clock)

    def step(self, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.clock += dt
        return self.current()

    def tag_time(self, tag, cycle=0):
        """Instant for disturbance tags: T1/T3 mid dual support, T2/T4 mid swing."""
        phase = {"T1": "dual_support_1", "T2": "right_swing", "T3": "dual_support_2", "T4": "left_swing"}[tag]
        i = PHASES.index(phase)
        return cycle * self.period + self.phase_start(phase) + 0.5 * self.durations[i]


def gait_step(schedule: GaitSchedule, dt):
    """Advance the clock; returns ``(phase, contact_set, ramp_scalars)``."""
    state = schedule.step(dt)
    return state.phase, state.contacts, state.ramps


# -- stepping region ---------------------------------------------------------------


@dataclass
class StepRegion:
    """Admissible step box relative to the stance foot, in the heading frame.

    ``lateral_min``/``lateral_max`` are measured from the stance foot towards
    the swing foot's own side, so a positive ``lateral_min`` forbids leg
    crossing while a negative one allows it. Targets closer than
    ``keepout_lateral`` to the stance foot laterally must also clear it by
    ``keepout_sagittal`` fore or aft, since two legs cannot share one spot.
    """

    mode: str = "proposed_extended"
    sagittal_min: float = -0.25
    sagittal_max: float = 0.25
    lateral_min: float = -0.12
    lateral_max: float = 0.35
    keepout_lateral: float = 0.0
    keepout_sagittal: float = 0.0

    def __post_init__(self):
        if self.sagittal_min > self.sagittal_max or self.lateral_min > self.lateral_max:
            raise ValueError("empty stepping region")
        if self.mode == "baseline_restricted" and self.lateral_min <= 0:
            raise ValueError("restricted region must exclude the contralateral half-plane")
        if self.keepout_sagittal < 0:
            raise ValueError("keep-out distance must be non-negative")

    @classmethod
    def baseline(cls, min_gap=0.08, **kw):
        return cls(mode="baseline_restricted", lateral_min=min_gap, **kw)

    @classmethod
    def extended(cls, crossing=0.12, **kw):
        return cls(mode="proposed_extended", lateral_min=-crossing, **kw)

    def in_keepout(self, sag, lat):
        return lat < self.keepout_lateral and abs(sag) < self.keepout_sagittal


def step_offsets(target, stance_foot, swing_foot=LEFT, yaw=0.0):
    """``(sagittal, lateral)`` offset of ``target`` from the stance foot in the heading frame."""
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.asarray(target, dtype=float)[:2] - np.asarray(stance_foot, dtype=float)[:2]
    return c * d[0] + s * d[1], side_sign(swing_foot) * (-s * d[0] + c * d[1])


def clamp_step(step_target, region: StepRegion, stance_foot, swing_foot=LEFT, yaw=0.0, side_hint=None):
    """Project ``step_target`` onto ``region`` around ``stance_foot``.

    Targets inside the keep-out band move fore or aft (``side_hint`` picks
    the side, otherwise the nearer one) so the lateral placement survives.
    """
    target = np.array(step_target, dtype=float)
    c, s = math.cos(yaw), math.sin(yaw)
    sag, lat = step_offsets(target, stance_foot, swing_foot, yaw)
    sag = min(max(sag, region.sagittal_min), region.sagittal_max)
    lat = min(max(lat, region.lateral_min), region.lateral_max)
    if region.in_keepout(sag, lat):
        first = side_hint if side_hint in (-1, 1) else (1 if sag >= 0 else -1)
        for side in (first, -first):
            cand = side * region.keepout_sagittal
            if region.sagittal_min <= cand <= region.sagittal_max:
                sag = cand
                break
        else:
            lat = min(max(region.keepout_lateral, region.lateral_min), region.lateral_max)
    lat = side_sign(swing_foot) * lat
    target[0] = stance_foot[0] + c * sag - s * lat
    target[1] = stance_foot[1] + s * sag + c * lat
    return target


# -- time-to-velocity-reversal planner ---------------------------------------------


@dataclass
class TvrParams:
    """Linear-inverted-pendulum foot placement parameters.

    ``kappa`` is derived from ``t_reverse``, the time after touchdown at
    which the CoM velocity should reverse, unless it is set explicitly.
    Choosing ``t_reverse`` equal to the single-support time makes the
    in-place stepping map deadbeat. ``lateral_offset`` defaults to the
    offset whose periodic orbit has feet ``step_width`` apart, which needs
    the single-support time as well (see :meth:`resolved`).
    """

    height: float = 0.45
    t_reverse: float = 0.276
    kappa: float | None = None
    step_width: float = 0.14
    lateral_offset: float | None = None
    sagittal_offset: float = 0.0
    gravity: float = 9.81

    def __post_init__(self):
        if self.height <= 0:
            raise ValueError("CoM height must be positive")
        if self.t_reverse <= 0 and self.kappa is None:
            raise ValueError("t_reverse must be positive")
        if self.gain <= 0:
            raise ValueError("velocity gain must be positive")

    @property
    def omega(self):
        return math.sqrt(self.gravity / self.height)

    @property
    def gain(self):
        if self.kappa is not None:
            return self.kappa
        w = self.omega
        return 1.0 / (w * math.tanh(w * self.t_reverse))

    def orbit_offset(self, single_support):
        """Nominal lateral offset for a symmetric orbit of width ``step_width``.

        On that orbit the CoM crosses the midpoint at speed
        ``(W/2) w tanh(w T/2)``; the placement rule reproduces the
        orbit when ``offset = W/2 - gain * speed``.
        """
        w = self.omega
        speed = 0.5 * self.step_width * w * math.tanh(0.5 * w * single_support)
        return 0.5 * self.step_width - self.gain * speed

    def resolved(self, single_support):
        """Copy with ``lateral_offset`` filled in for the given single-support time."""
        if self.lateral_offset is not None:
            return self
        return dataclasses.replace(self, lateral_offset=self.orbit_offset(single_support))


def lipm_rollout(x0, xd0, pivot, omega, t):
    """Closed-form LIPM state ``(x, xd)`` after ``t`` seconds about ``pivot``."""
    ch, sh = math.cosh(omega * t), math.sinh(omega * t)
    rel = np.asarray(x0) - np.asarray(pivot)
    x = np.asarray(pivot) + rel * ch + np.asarray(xd0) / omega * sh
    xd = rel * omega * sh + np.asarray(xd0) * ch
    return x, xd


def tvr_plan(com_pos, com_vel, stance_foot, params: TvrParams, swing_foot=LEFT, yaw=0.0, region=None, side_hint=None):
    """Step target ``com + kappa v + offset`` on the ground plane.

    ``com_pos``/``com_vel`` are the (predicted) CoM state at touchdown. The
    nominal offset points to the swing foot's side in the heading frame.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    offset = params.lateral_offset if params.lateral_offset is not None else 0.5 * params.step_width
    lat = side_sign(swing_foot) * offset
    target = np.zeros(3)
    target[0] = com_pos[0] + params.gain * com_vel[0] + c * params.sagittal_offset - s * lat
    target[1] = com_pos[1] + params.gain * com_vel[1] + s * params.sagittal_offset + c * lat
    if region is not None:
        target = clamp_step(target, region, stance_foot, swing_foot, yaw, side_hint)
    return target


# -- swing trajectories ------------------------------------------------------------


def quintic_coeffs(p0, v0, a0, pf, vf, af, T):
    """Coefficients (lowest order first) of the quintic meeting both boundary states."""
    p0, v0, a0, pf, vf, af = (np.asarray(v, dtype=float) for v in (p0, v0, a0, pf, vf, af))
    T2, T3, T4, T5 = T * T, T**3, T**4, T**5
    c3 = (20 * (pf - p0) - (8 * vf + 12 * v0) * T - (3 * a0 - af) * T2) / (2 * T3)
    c4 = (30 * (p0 - pf) + (14 * vf + 16 * v0) * T + (3 * a0 - 2 * af) * T2) / (2 * T4)
    c5 = (12 * (pf - p0) - 6 * (vf + v0) * T - (a0 - af) * T2) / (2 * T5)
    return np.array([p0, v0, 0.5 * a0, c3, c4, c5])


def quintic_eval(coeffs, tau):
    c0, c1, c2, c3, c4, c5 = coeffs
    pos = c0 + tau * (c1 + tau * (c2 + tau * (c3 + tau * (c4 + tau * c5))))
    vel = c1 + tau * (2 * c2 + tau * (3 * c3 + tau * (4 * c4 + tau * 5 * c5)))
    acc = 2 * c2 + tau * (6 * c3 + tau * (12 * c4 + tau * 20 * c5))
    return pos, vel, acc


def min_jerk(t, t0, tf, p0, pf, apex=None):
    """Minimum-jerk point-to-point motion with zero boundary velocity/acceleration.

    With ``apex`` the vertical axis instead rises to ``max(z0, zf) + apex`` at
    the midpoint and descends, each half being its own min-jerk segment.
    Times outside ``[t0, tf]`` clamp to the endpoints.
    """
    if not tf > t0:
        raise ValueError("min_jerk needs t0 < tf")
    return SwingTrajectory(p0, pf, t0, tf, apex).evaluate(t)


class SwingTrajectory:
    def __init__(self, p0, pf, t0, tf, apex=None):
        self.p0 = np.array(p0, dtype=float)
        self.pf = np.array(pf, dtype=float)
        self.t0 = float(t0)
        self.tf = float(tf)
        self.apex = apex
        zero = np.zeros_like(self.p0)
        self._segments = [(self.t0, self.tf, quintic_coeffs(self.p0, zero, zero, self.pf, zero, zero, self.tf - self.t0))]
        self._vertical = None
        if apex is not None:
            self._set_vertical(self.p0[2], 0.0, 0.0, self.t0)

    @property
    def t_mid(self):
        return 0.5 * (self.t0 + self.tf)

    @property
    def apex_height(self):
        return max(self.p0[2], self.pf[2]) + self.apex

    def _set_vertical(self, z, vz, az, t_from):
        tm = self.t_mid
        top = self.apex_height
        if t_from < tm - 1e-12:
            up = (t_from, tm, quintic_coeffs(z, vz, az, top, 0.0, 0.0, tm - t_from))
            down = (tm, self.tf, quintic_coeffs(top, 0.0, 0.0, self.pf[2], 0.0, 0.0, self.tf - tm))
            self._vertical = [up, down]
        else:
            T = max(self.tf - t_from, 1e-6)
            self._vertical = [(t_from, self.tf, quintic_coeffs(z, vz, az, self.pf[2], 0.0, 0.0, T))]

    @staticmethod
    def _eval_segments(segments, t):
        last = len(segments) - 1
        for i, (start, end, coeffs) in enumerate(segments):
            if t <= end or i == last:
                tau = min(max(t - start, 0.0), end - start)
                return quintic_eval(coeffs, tau)

    def evaluate(self, t):
        pos, vel, acc = self._eval_segments(self._segments, t)
        if t <= self.t0 or t >= self.tf:
            vel = np.zeros_like(vel)
            acc = np.zeros_like(acc)
        if self._vertical is not None:
            z, vz, az = self._eval_segments(self._vertical, t)
            if t <= self.t0 or t >= self.tf:
                vz = az = 0.0
            pos = pos.copy()
            vel = vel.copy()
            acc = acc.copy()
            pos[2], vel[2], acc[2] = z, vz, az
        return pos, vel, acc

    def retarget(self, t, new_target):
        """Re-fit from the trajectory state at ``t`` to ``new_target``, keeping continuity."""
        t = min(max(t, self.t0), self.tf)
        pos, vel, acc = self.evaluate(t)
        self.pf = np.array(new_target, dtype=float)
        T = max(self.tf - t, 1e-6)
        zero = np.zeros_like(pos)
        self._segments = [(t, self.tf, quintic_coeffs(pos, vel, acc, self.pf, zero, zero, T))]
        if self._vertical is not None:
            self._set_vertical(pos[2], vel[2], acc[2], t)


# -- single-rigid-body reaction-force planner ----------------------------------------


@dataclass
class SrbParams:
    mass: float = 5.4
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.06, 0.05, 0.02]))
    dt: float = 0.03
    horizon: int = 20
    mu: float = 0.7
    fz_max: float = 150.0
    # weights on [theta, p, omega, v]
    weights: np.ndarray = field(
        default_factory=lambda: np.array([50.0, 50.0, 10.0, 0.0, 0.0, 200.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0])
    )
    force_weight: float = 1e-4
    gravity: float = 9.81

    def __post_init__(self):
        inertia = np.asarray(self.inertia, dtype=float)
        self.inertia = np.diag(inertia) if inertia.shape == (3,) else inertia
        self.weights = np.asarray(self.weights, dtype=float)
        if self.inertia.shape != (3, 3) or self.weights.shape != (12,):
            raise ValueError("SRB inertia must be 3x3 (or 3 diagonal entries) and weights must have 12 entries")
        if self.mass <= 0 or self.dt <= 0 or self.horizon < 1:
            raise ValueError("SRB mass, step and horizon must be positive")


@dataclass
class SrbState:
    theta: np.ndarray
    pos: np.ndarray
    omega: np.ndarray
    vel: np.ndarray

    def vector(self):
        return np.concatenate([self.theta, self.pos, self.omega, self.vel])


def _srb_step_matrices(params, feet, p_ref):
    """Exact zero-order-hold discretization; the continuous drift matrix is nilpotent."""
    dt = params.dt
    n_u = 3 * len(feet)
    Bc = np.zeros((12, n_u))
    Iinv = np.linalg.inv(params.inertia)
    for j, foot in enumerate(feet):
        r = np.asarray(foot) - p_ref
        rx = np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])
        Bc[6:9, 3 * j : 3 * j + 3] = Iinv @ rx
        Bc[9:12, 3 * j : 3 * j + 3] = np.eye(3) / params.mass
    Ac = np.zeros((12, 12))
    Ac[0:3, 6:9] = np.eye(3)
    Ac[3:6, 9:12] = np.eye(3)
    Ad = np.eye(12) + Ac * dt
    Bd = Bc * dt + Ac @ Bc * (0.5 * dt * dt)
    gc = np.zeros(12)
    gc[11] = -params.gravity
    gd = gc * dt + Ac @ gc * (0.5 * dt * dt)
    return Ad, Bd, gd


def srb_condensed(state: SrbState, schedule, x_ref, params: SrbParams):
    """Condensed prediction ``X = Sx x0 + Su U + Sg`` over the horizon.

    ``schedule`` is a list (one entry per horizon step) of foot position lists
    for the feet in contact during that step.
    """
    n = len(schedule)
    sizes = [3 * len(feet) for feet in schedule]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    nu = int(offsets[-1])
    Sx = np.zeros((12 * n, 12))
    Su = np.zeros((12 * n, nu))
    Sg = np.zeros(12 * n)
    A_prev = np.eye(12)
    Su_prev = np.zeros((12, nu))
    g_prev = np.zeros(12)
    for k, feet in enumerate(schedule):
        Ad, Bd, gd = _srb_step_matrices(params, feet, x_ref[k][3:6])
        A_prev = Ad @ A_prev
        Su_k = Ad @ Su_prev
        Su_k[:, offsets[k] : offsets[k + 1]] += Bd
        g_prev = Ad @ g_prev + gd
        Sx[12 * k : 12 * k + 12] = A_prev
        Su[12 * k : 12 * k + 12] = Su_k
        Sg[12 * k : 12 * k + 12] = g_prev
        Su_prev = Su_k
    return Sx, Su, Sg, offsets


def _nominal_forces(schedule, params):
    u = []
    for feet in schedule:
        share = params.mass * params.gravity / max(len(feet), 1)
        for _ in feet:
            u.extend([0.0, 0.0, share])
    return np.array(u)


def srb_force_constraints(schedule, params, fz_max=None):
    """``C u >= d`` rows: friction pyramid and normal-force bounds per contact."""
    nu = sum(3 * len(f) for f in schedule)
    rows, rhs = [], []
    col = 0
    for k, feet in enumerate(schedule):
        for j in range(len(feet)):
            hi = params.fz_max if fz_max is None else fz_max[k][j]
            for axis in (0, 1):
                for sign in (1.0, -1.0):
                    row = np.zeros(nu)
                    row[col + 2] = params.mu
                    row[col + axis] = -sign
                    rows.append(row)
                    rhs.append(0.0)
            row = np.zeros(nu)
            row[col + 2] = 1.0
            rows.append(row)
            rhs.append(0.0)
            row = np.zeros(nu)
            row[col + 2] = -1.0
            rows.append(row)
            rhs.append(-hi)
            col += 3
    return np.array(rows).reshape(-1, nu), np.array(rhs)


def static_force_split(com_xy, feet, mass, gravity=9.81):
    """Vertical weight split by inverse horizontal distance to the CoM projection."""
    d = np.array([np.linalg.norm(np.asarray(f)[:2] - np.asarray(com_xy)[:2]) for f in feet])
    w = 1.0 / np.maximum(d, 1e-6)
    w /= w.sum()
    out = np.zeros((len(feet), 3))
    out[:, 2] = w * mass * gravity
    return out


def srb_reaction_forces(state: SrbState, schedule, x_ref, params: SrbParams, fz_max=None):
    """Reaction forces over the horizon from one convex QP.

    Returns a list (per horizon step) of ``(n_contacts, 3)`` arrays. The
    first entry is the reference handed to the whole-body QP. Falls back to a
    static weight split when the QP is infeasible.
    """
    if any(len(feet) == 0 for feet in schedule):
        raise ValueError("every horizon step needs at least one stance foot")
    x_ref = np.asarray(x_ref, dtype=float)
    Sx, Su, Sg, offsets = srb_condensed(state, schedule, x_ref, params)
    L = np.tile(params.weights, len(schedule))
    x0 = state.vector()
    free = Sx @ x0 + Sg - x_ref.reshape(-1)
    u_nom = _nominal_forces(schedule, params)
    LSu = Su * L[:, None]
    H = Su.T @ LSu + params.force_weight * np.eye(Su.shape[1])
    g = -(LSu.T @ free) + params.force_weight * u_nom
    C, d = srb_force_constraints(schedule, params, fz_max)
    try:
        u = quadprog.solve_qp(0.5 * (H + H.T), g, C.T, d, 0)[0]
    except ValueError:
        return [static_force_split(state.pos, feet, params.mass, params.gravity) for feet in schedule]
    return [u[offsets[k] : offsets[k + 1]].reshape(-1, 3) for k in range(len(schedule))]
