"""Compiled forward pass for the kinematic tree.

One sweep from the root produces body poses, world Jacobians, velocities,
velocity-product accelerations, the mass matrix and the bias vector.
"""
import math

import numpy as np
from numba import njit

FLOATING = 0
REVOLUTE = 1
FIXED = 2


@njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def _quat_matrix(qw, qx, qy, qz, out):
    out[0, 0] = 1 - 2 * (qy * qy + qz * qz)
    out[0, 1] = 2 * (qx * qy - qw * qz)
    out[0, 2] = 2 * (qx * qz + qw * qy)
    out[1, 0] = 2 * (qx * qy + qw * qz)
    out[1, 1] = 1 - 2 * (qx * qx + qz * qz)
    out[1, 2] = 2 * (qy * qz - qw * qx)
    out[2, 0] = 2 * (qx * qz - qw * qy)
    out[2, 1] = 2 * (qy * qz + qw * qx)
    out[2, 2] = 1 - 2 * (qx * qx + qy * qy)


@njit(cache=True)
def _axis_angle(axis, angle, out):
    x, y, z = axis[0], axis[1], axis[2]
    c = math.cos(angle)
    s = math.sin(angle)
    t = 1.0 - c
    out[0, 0] = t * x * x + c
    out[0, 1] = t * x * y - s * z
    out[0, 2] = t * x * z + s * y
    out[1, 0] = t * x * y + s * z
    out[1, 1] = t * y * y + c
    out[1, 2] = t * y * z - s * x
    out[2, 0] = t * x * z - s * y
    out[2, 1] = t * y * z + s * x
    out[2, 2] = t * z * z + c


@njit(cache=True)
def tree_pass(parent, jtype, axis, R_tp, p_tp, q_index, v_index, mass, com, inertia, gravity, q, qd, has_vel):
    nb = parent.shape[0]
    nv = qd.shape[0]
    R = np.zeros((nb, 3, 3))
    p = np.zeros((nb, 3))
    Jw = np.zeros((nb, 3, nv))
    Jv = np.zeros((nb, 3, nv))
    w = np.zeros((nb, 3))
    v = np.zeros((nb, 3))
    dw = np.zeros((nb, 3))
    dv = np.zeros((nb, 3))
    tmp = np.zeros(3)
    tmp2 = np.zeros(3)
    r = np.zeros(3)
    Rj = np.zeros((3, 3))

    for i in range(nb):
        par = parent[i]
        if par < 0:
            if jtype[i] == FLOATING:
                _quat_matrix(q[3], q[4], q[5], q[6], R[i])
                for a in range(3):
                    p[i, a] = q[a]
                    for b in range(3):
                        Jw[i, a, b] = R[i, a, b]
                        Jv[i, a, 3 + b] = R[i, a, b]
                if has_vel:
                    for a in range(3):
                        s_w = 0.0
                        s_v = 0.0
                        for b in range(3):
                            s_w += R[i, a, b] * qd[b]
                            s_v += R[i, a, b] * qd[3 + b]
                        w[i, a] = s_w
                        v[i, a] = s_v
                    _cross(w[i], v[i], tmp)
                    for a in range(3):
                        dv[i, a] = tmp[a]
            else:
                R[i] = R_tp[i]
                p[i] = p_tp[i]
            continue

        Rp = R[par]
        # fixed part of the joint transform
        for a in range(3):
            s = 0.0
            for b in range(3):
                s += Rp[a, b] * p_tp[i, b]
            r[a] = s
            p[i, a] = p[par, a] + s
        Rf = Rp @ R_tp[i]
        # Jv = Jv_par - [r]x Jw_par
        for j in range(nv):
            jw0 = Jw[par, 0, j]
            jw1 = Jw[par, 1, j]
            jw2 = Jw[par, 2, j]
            Jw[i, 0, j] = jw0
            Jw[i, 1, j] = jw1
            Jw[i, 2, j] = jw2
            Jv[i, 0, j] = Jv[par, 0, j] - (r[1] * jw2 - r[2] * jw1)
            Jv[i, 1, j] = Jv[par, 1, j] - (r[2] * jw0 - r[0] * jw2)
            Jv[i, 2, j] = Jv[par, 2, j] - (r[0] * jw1 - r[1] * jw0)
        if has_vel:
            _cross(w[par], r, tmp)
            _cross(w[par], tmp, tmp2)
            for a in range(3):
                w[i, a] = w[par, a]
                v[i, a] = v[par, a] + tmp[a]
                dw[i, a] = dw[par, a]
            _cross(dw[par], r, tmp)
            for a in range(3):
                dv[i, a] = dv[par, a] + tmp[a] + tmp2[a]
        if jtype[i] == REVOLUTE:
            _axis_angle(axis[i], q[q_index[i]], Rj)
            R[i] = Rf @ Rj
            ax = Rf @ axis[i]
            vi = v_index[i]
            for a in range(3):
                Jw[i, a, vi] += ax[a]
            if has_vel:
                rate = ax * qd[vi]
                _cross(w[par], rate, tmp)
                for a in range(3):
                    dw[i, a] += tmp[a]
                    w[i, a] += rate[a]
        else:
            R[i] = Rf

    # per-body centre-of-mass Jacobians and world inertias
    c = np.zeros((nb, 3))
    Jc = np.zeros((nb, 3, nv))
    Iw = np.zeros((nb, 3, 3))
    A = np.zeros((nv, nv))
    bias = np.zeros(nv)
    acc = np.zeros(3)
    force = np.zeros(3)
    torque = np.zeros(3)
    for k in range(nb):
        ck = R[k] @ com[k]
        c[k] = ck
        for j in range(nv):
            jw0 = Jw[k, 0, j]
            jw1 = Jw[k, 1, j]
            jw2 = Jw[k, 2, j]
            Jc[k, 0, j] = Jv[k, 0, j] - (ck[1] * jw2 - ck[2] * jw1)
            Jc[k, 1, j] = Jv[k, 1, j] - (ck[2] * jw0 - ck[0] * jw2)
            Jc[k, 2, j] = Jv[k, 2, j] - (ck[0] * jw1 - ck[1] * jw0)
        Ik = R[k] @ inertia[k] @ R[k].T
        Iw[k] = Ik
        IJ = Ik @ Jw[k]
        m = mass[k]
        for i in range(nv):
            for j in range(i, nv):
                s = m * (Jc[k, 0, i] * Jc[k, 0, j] + Jc[k, 1, i] * Jc[k, 1, j] + Jc[k, 2, i] * Jc[k, 2, j])
                s += Jw[k, 0, i] * IJ[0, j] + Jw[k, 1, i] * IJ[1, j] + Jw[k, 2, i] * IJ[2, j]
                A[i, j] += s
        # Newton-Euler wrench at qdd = 0
        if has_vel:
            _cross(w[k], ck, tmp)
            _cross(w[k], tmp, tmp2)
            _cross(dw[k], ck, tmp)
            for a in range(3):
                acc[a] = dv[k, a] + tmp[a] + tmp2[a]
            Iww = Ik @ w[k]
            _cross(w[k], Iww, tmp)
            Idw = Ik @ dw[k]
            for a in range(3):
                torque[a] = Idw[a] + tmp[a]
        else:
            for a in range(3):
                acc[a] = 0.0
                torque[a] = 0.0
        for a in range(3):
            force[a] = m * (acc[a] - gravity[a])
        for j in range(nv):
            bias[j] += (
                Jc[k, 0, j] * force[0] + Jc[k, 1, j] * force[1] + Jc[k, 2, j] * force[2]
                + Jw[k, 0, j] * torque[0] + Jw[k, 1, j] * torque[1] + Jw[k, 2, j] * torque[2]
            )
    for i in range(nv):
        for j in range(i + 1, nv):
            A[j, i] = A[i, j]
    return R, p, Jw, Jv, w, v, dw, dv, c, Jc, Iw, A, bias


@njit(cache=True)
def segment_closest(p0, p1, q0, q1, eps):
    """Parameters ``(s, t)`` of the closest points between two segments."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
    e = d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2]
    f = d2[0] * r[0] + d2[1] * r[1] + d2[2] * r[2]
    c = d1[0] * r[0] + d1[1] * r[1] + d1[2] * r[2]
    if a <= eps and e <= eps:
        # both near points; still project onto whichever has nonzero length
        if a > 0.0:
            return min(max(-c / a, 0.0), 1.0), 0.0
        if e > 0.0:
            return 0.0, min(max(f / e, 0.0), 1.0)
        return 0.0, 0.0
    if a <= eps:
        t = min(max(f / e, 0.0), 1.0)
        s = 0.0
        if a > 0.0:
            w = q0 + t * d2 - p0
            s = min(max((d1[0] * w[0] + d1[1] * w[1] + d1[2] * w[2]) / a, 0.0), 1.0)
        return s, t
    if e <= eps:
        s = min(max(-c / a, 0.0), 1.0)
        t = 0.0
        if e > 0.0:
            w = p0 + s * d1 - q0
            t = min(max((d2[0] * w[0] + d2[1] * w[1] + d2[2] * w[2]) / e, 0.0), 1.0)
        return s, t
    b = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2]
    denom = a * e - b * b
    if denom <= eps * a * e:
        # parallel: midpoint of the overlap of q's projection onto p
        s_q0 = -c / a
        s_q1 = s_q0 + b / a
        lo = max(0.0, min(s_q0, s_q1))
        hi = min(1.0, max(s_q0, s_q1))
        if lo <= hi:
            s = 0.5 * (lo + hi)
        elif max(s_q0, s_q1) < 0.0:
            s = 0.0
        else:
            s = 1.0
        cp = p0 + s * d1
        w = cp - q0
        t = min(max((d2[0] * w[0] + d2[1] * w[1] + d2[2] * w[2]) / e, 0.0), 1.0)
        cq = q0 + t * d2
        w = cq - p0
        s = min(max((d1[0] * w[0] + d1[1] * w[1] + d1[2] * w[2]) / a, 0.0), 1.0)
        return s, t
    s = min(max((b * f - c * e) / denom, 0.0), 1.0)
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        s = min(max((b - c) / a, 0.0), 1.0)
    return s, t


@njit(cache=True)
def _point_jac(Jw, Jv, rel):
    nv = Jw.shape[1]
    out = np.empty((3, nv))
    for j in range(nv):
        out[0, j] = Jv[0, j] - (rel[1] * Jw[2, j] - rel[2] * Jw[1, j])
        out[1, j] = Jv[1, j] - (rel[2] * Jw[0, j] - rel[0] * Jw[2, j])
        out[2, j] = Jv[2, j] - (rel[0] * Jw[1, j] - rel[1] * Jw[0, j])
    return out


@njit(cache=True)
def capsule_pair(R, p, Jw, Jv, w, v, dw, dv, body_a, a0, a1, body_b, b0, b1, tie, has_vel):
    """Closest axis points, their distance, unit normal (b -> a) and rate terms.

    Returns ``(ca, cb, d, n, J_rel, rate, bias)`` where ``J_rel`` maps
    ``qd`` to the rate of ``d``.
    """
    pa0 = p[body_a] + R[body_a] @ a0
    pa1 = p[body_a] + R[body_a] @ a1
    pb0 = p[body_b] + R[body_b] @ b0
    pb1 = p[body_b] + R[body_b] @ b1
    s, t = segment_closest(pa0, pa1, pb0, pb1, 1e-12)
    ca = pa0 + s * (pa1 - pa0)
    cb = pb0 + t * (pb1 - pb0)
    delta = ca - cb
    d = math.sqrt(delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2])
    if d > 1e-12:
        n = delta / d
    else:
        n = tie.copy()
    ra = ca - p[body_a]
    rb = cb - p[body_b]
    Ja = _point_jac(Jw[body_a], Jv[body_a], ra)
    Jb = _point_jac(Jw[body_b], Jv[body_b], rb)
    J = n @ (Ja - Jb)
    rate = 0.0
    bias = 0.0
    if has_vel:
        tmp = np.zeros(3)
        tmp2 = np.zeros(3)
        _cross(w[body_a], ra, tmp)
        va = v[body_a] + tmp
        _cross(w[body_b], rb, tmp)
        vb = v[body_b] + tmp
        dvel = va - vb
        rate = n[0] * dvel[0] + n[1] * dvel[1] + n[2] * dvel[2]
        _cross(dw[body_a], ra, tmp)
        _cross(w[body_a], ra, tmp2)
        acc_a = dv[body_a] + tmp + np.cross(w[body_a], tmp2)
        _cross(dw[body_b], rb, tmp)
        _cross(w[body_b], rb, tmp2)
        acc_b = dv[body_b] + tmp + np.cross(w[body_b], tmp2)
        da = acc_a - acc_b
        bias = n[0] * da[0] + n[1] * da[1] + n[2] * da[2]
        if d > 1e-9:
            perp = dvel - rate * n
            # the normal turns as the witness line rotates
            bias += (perp[0] * perp[0] + perp[1] * perp[1] + perp[2] * perp[2]) / d
    return ca, cb, d, n, J, rate, bias


@njit(cache=True)
def capsule_axis_distance(R, p, body_a, a0, a1, body_b, b0, b1):
    pa0 = p[body_a] + R[body_a] @ a0
    pa1 = p[body_a] + R[body_a] @ a1
    pb0 = p[body_b] + R[body_b] @ b0
    pb1 = p[body_b] + R[body_b] @ b1
    s, t = segment_closest(pa0, pa1, pb0, pb1, 1e-12)
    delta = pa0 + s * (pa1 - pa0) - pb0 - t * (pb1 - pb0)
    return math.sqrt(delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2])


@njit(cache=True)
def integrate_floating(q, qd, dt):
    """Base pose update with the SE(3) exponential of the body twist."""
    out = q.copy()
    R = np.empty((3, 3))
    _quat_matrix(q[3], q[4], q[5], q[6], R)
    wx, wy, wz = qd[0] * dt, qd[1] * dt, qd[2] * dt
    vx, vy, vz = qd[3] * dt, qd[4] * dt, qd[5] * dt
    th = math.sqrt(wx * wx + wy * wy + wz * wz)
    W = np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])
    if th < 1e-9:
        V = np.eye(3) + 0.5 * W
    else:
        V = np.eye(3) + (1.0 - math.cos(th)) / (th * th) * W + (th - math.sin(th)) / (th * th * th) * (W @ W)
    vel = np.array([vx, vy, vz])
    out[0:3] = q[0:3] + R @ (V @ vel)
    if th < 1e-12:
        dq0, dq1, dq2, dq3 = 1.0, 0.5 * wx, 0.5 * wy, 0.5 * wz
    else:
        s = math.sin(0.5 * th) / th
        dq0, dq1, dq2, dq3 = math.cos(0.5 * th), s * wx, s * wy, s * wz
    aw, ax, ay, az = q[3], q[4], q[5], q[6]
    nw = aw * dq0 - ax * dq1 - ay * dq2 - az * dq3
    nx = aw * dq1 + ax * dq0 + ay * dq3 - az * dq2
    ny = aw * dq2 - ax * dq3 + ay * dq0 + az * dq1
    nz = aw * dq3 + ax * dq2 - ay * dq1 + az * dq0
    norm = math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    out[3] = nw / norm
    out[4] = nx / norm
    out[5] = ny / norm
    out[6] = nz / norm
    for i in range(7, q.shape[0]):
        out[i] = q[i] + qd[i - 1] * dt
    return out


@njit(cache=True)
def psd_pinv(M, rcond):
    """Eigendecomposition pseudo-inverse dropping eigenvalues below ``rcond * lambda_max``."""
    lam, V = np.linalg.eigh(M)
    top = max(lam[-1], 1e-300)
    n = M.shape[0]
    out = np.zeros((n, n))
    for k in range(n):
        if lam[k] > rcond * top:
            inv = 1.0 / lam[k]
            for i in range(n):
                vik = V[i, k] * inv
                for j in range(n):
                    out[i, j] += vik * V[j, k]
    return out
