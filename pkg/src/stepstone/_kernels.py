"""Numba kernels for the kinematic-tree passes.

All kernels are batched over a leading dimension so finite-difference
Jacobians and mass-matrix columns come from a single call. Bodies are
packed in topological order (parent index < child index, root = 0), so a
forward loop propagates frames and a reverse loop accumulates forces.

Layouts (batch row b):
  q[b] = [base pos (3), base quat wxyz (4), joint angles]
  v[b] = [base linear vel, world (3), base angular vel, body (3), rates]
  a[b] = same layout as v
  fext[b, e] = world-frame force applied at end-effector point e
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True, inline="always")
def _mat3_vec(R, x, out):
    for i in range(3):
        out[i] = R[i, 0] * x[0] + R[i, 1] * x[1] + R[i, 2] * x[2]


@njit(cache=True, inline="always")
def _mat3_T_vec(R, x, out):
    for i in range(3):
        out[i] = R[0, i] * x[0] + R[1, i] * x[1] + R[2, i] * x[2]


@njit(cache=True, inline="always")
def _mat3_mat3(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True)
def _quat_to_mat(q, out):
    w, x, y, z = q[0], q[1], q[2], q[3]
    out[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[0, 1] = 2.0 * (x * y - z * w)
    out[0, 2] = 2.0 * (x * z + y * w)
    out[1, 0] = 2.0 * (x * y + z * w)
    out[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[1, 2] = 2.0 * (y * z - x * w)
    out[2, 0] = 2.0 * (x * z - y * w)
    out[2, 1] = 2.0 * (y * z + x * w)
    out[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(cache=True)
def _axis_angle_mat(axis, angle, out):
    # Rodrigues on a unit axis
    c = np.cos(angle)
    s = np.sin(angle)
    t = 1.0 - c
    x, y, z = axis[0], axis[1], axis[2]
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
def _forward_pass(q, v, a, parent, jR, jt, jaxis, R, pos, sW, w, vl, alp, al):
    """Propagate frames, velocities and accelerations down the tree."""
    nb = parent.shape[0]
    tmp = np.empty(3)
    tmp2 = np.empty(3)
    tW = np.empty(3)
    Rj = np.empty((3, 3))
    Rl = np.empty((3, 3))

    _quat_to_mat(q[3:7], R[0])
    for i in range(3):
        pos[0, i] = q[i]
        vl[0, i] = v[i]
        al[0, i] = a[i]
    _mat3_vec(R[0], v[3:6], w[0])
    _mat3_vec(R[0], a[3:6], alp[0])
    for i in range(3):
        sW[0, i] = 0.0

    for i in range(1, nb):
        p = parent[i]
        qj = q[7 + i - 1]
        qd = v[6 + i - 1]
        qdd = a[6 + i - 1]
        _axis_angle_mat(jaxis[i], qj, Rj)
        _mat3_mat3(jR[i], Rj, Rl)
        _mat3_mat3(R[p], Rl, R[i])
        _mat3_vec(R[p], jt[i], tW)
        # world joint axis: invariant under the joint's own rotation
        _mat3_vec(jR[i], jaxis[i], tmp)
        _mat3_vec(R[p], tmp, sW[i])
        for k in range(3):
            pos[i, k] = pos[p, k] + tW[k]
            w[i, k] = w[p, k] + sW[i, k] * qd
        _cross(w[p], tW, tmp)
        for k in range(3):
            vl[i, k] = vl[p, k] + tmp[k]
        # alpha = alpha_p + s*qdd + w_p x (s*qd)
        for k in range(3):
            tmp[k] = sW[i, k] * qd
        _cross(w[p], tmp, tmp2)
        for k in range(3):
            alp[i, k] = alp[p, k] + sW[i, k] * qdd + tmp2[k]
        # a = a_p + alpha_p x t + w_p x (w_p x t)
        _cross(alp[p], tW, tmp)
        for k in range(3):
            al[i, k] = al[p, k] + tmp[k]
        _cross(w[p], tW, tmp)
        _cross(w[p], tmp, tmp2)
        for k in range(3):
            al[i, k] += tmp2[k]


@njit(cache=True)
def _rnea_single(q, v, a, fext, parent, jR, jt, jaxis, mass, com, inertia,
                 ee_body, ee_off, grav, tau):
    nb = parent.shape[0]
    nv = v.shape[0]
    R = np.empty((nb, 3, 3))
    pos = np.empty((nb, 3))
    sW = np.empty((nb, 3))
    w = np.empty((nb, 3))
    vl = np.empty((nb, 3))
    alp = np.empty((nb, 3))
    al = np.empty((nb, 3))
    f = np.empty((nb, 3))
    n = np.empty((nb, 3))
    rc = np.empty(3)
    acom = np.empty(3)
    Iw = np.empty((3, 3))
    T1 = np.empty((3, 3))
    tmp = np.empty(3)
    tmp2 = np.empty(3)

    _forward_pass(q, v, a, parent, jR, jt, jaxis, R, pos, sW, w, vl, alp, al)

    # per-body Newton-Euler wrench about the body frame origin
    for i in range(nb):
        Ri = R[i]
        _mat3_vec(Ri, com[i], rc)
        _cross(alp[i], rc, tmp)
        for k in range(3):
            acom[k] = al[i, k] + tmp[k]
        _cross(w[i], rc, tmp)
        _cross(w[i], tmp, tmp2)
        for k in range(3):
            acom[k] += tmp2[k]
        m = mass[i]
        for k in range(3):
            f[i, k] = m * (acom[k] - grav[k])
        # Iw = R I R^T
        _mat3_mat3(Ri, inertia[i], T1)
        for r in range(3):
            for c in range(3):
                Iw[r, c] = T1[r, 0] * Ri[c, 0] + T1[r, 1] * Ri[c, 1] + T1[r, 2] * Ri[c, 2]
        _mat3_vec(Iw, alp[i], tmp)
        _mat3_vec(Iw, w[i], tmp2)
        _cross(w[i], tmp2, n[i])
        for k in range(3):
            n[i, k] += tmp[k]
        _cross(rc, f[i], tmp)
        for k in range(3):
            n[i, k] += tmp[k]

    # external end-effector forces
    for e in range(ee_body.shape[0]):
        i = ee_body[e]
        _mat3_vec(R[i], ee_off[e], tmp)  # lever arm from body origin
        _cross(tmp, fext[e], tmp2)
        for k in range(3):
            f[i, k] -= fext[e, k]
            n[i, k] -= tmp2[k]

    # accumulate up the tree; joint torque = axis . transmitted moment
    for i in range(nb - 1, 0, -1):
        p = parent[i]
        tau[6 + i - 1] = sW[i, 0] * n[i, 0] + sW[i, 1] * n[i, 1] + sW[i, 2] * n[i, 2]
        for k in range(3):
            tmp[k] = pos[i, k] - pos[p, k]
        _cross(tmp, f[i], tmp2)
        for k in range(3):
            f[p, k] += f[i, k]
            n[p, k] += n[i, k] + tmp2[k]

    for k in range(3):
        tau[k] = f[0, k]
    _mat3_T_vec(R[0], n[0], tau[3:6])
    return nv  # silence unused warning


@njit(cache=True, parallel=True)
def rnea_batch(q, v, a, fext, parent, jR, jt, jaxis, mass, com, inertia,
               ee_body, ee_off, grav):
    """Inverse dynamics for a batch: generalized forces (B, n_v)."""
    B = q.shape[0]
    nv = v.shape[1]
    tau = np.empty((B, nv))
    for b in prange(B):
        _rnea_single(q[b], v[b], a[b], fext[b], parent, jR, jt, jaxis,
                     mass, com, inertia, ee_body, ee_off, grav, tau[b])
    return tau


@njit(cache=True)
def _points_single(q, v, parent, jR, jt, jaxis, pt_body, pt_off, pp, pv):
    nb = parent.shape[0]
    R = np.empty((nb, 3, 3))
    pos = np.empty((nb, 3))
    sW = np.empty((nb, 3))
    w = np.empty((nb, 3))
    vl = np.empty((nb, 3))
    alp = np.empty((nb, 3))
    al = np.empty((nb, 3))
    a = np.zeros(v.shape[0])
    tmp = np.empty(3)
    tmp2 = np.empty(3)

    _forward_pass(q, v, a, parent, jR, jt, jaxis, R, pos, sW, w, vl, alp, al)
    for e in range(pt_body.shape[0]):
        i = pt_body[e]
        _mat3_vec(R[i], pt_off[e], tmp)
        _cross(w[i], tmp, tmp2)
        for k in range(3):
            pp[e, k] = pos[i, k] + tmp[k]
            pv[e, k] = vl[i, k] + tmp2[k]


@njit(cache=True, parallel=True)
def points_batch(q, v, parent, jR, jt, jaxis, pt_body, pt_off):
    """World positions and velocities of body-fixed points, batched."""
    B = q.shape[0]
    npt = pt_body.shape[0]
    pp = np.empty((B, npt, 3))
    pv = np.empty((B, npt, 3))
    for b in prange(B):
        _points_single(q[b], v[b], parent, jR, jt, jaxis, pt_body, pt_off,
                       pp[b], pv[b])
    return pp, pv
