"""Quaternion and tangent-space arithmetic for floating-base states.

Conventions, stated once and used everywhere:
  - quaternions are stored [w, x, y, z] and kept unit;
  - rotation increments are applied on the right in the body frame,
    q_new = q * Exp(dtheta), so Log/Exp and all Jacobians follow the
    right-perturbation convention;
  - a configuration vector is [base position (3), base quaternion (4),
    joint angles (n)], its tangent is [dpos (3), dtheta (3), djoints (n)];
  - a full state stacks a configuration and a velocity; the velocity is
    already a plain vector (world-frame base linear velocity, body-frame
    base angular velocity, joint rates) and adds linearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_UNIT_TOL = 1e-9
_SMALL_ANGLE = 1e-8


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, both [w, x, y, z]."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_exp(dtheta: np.ndarray) -> np.ndarray:
    """Map a rotation vector to a unit quaternion.

    Below ``1e-8`` the half-angle terms switch to their second-order
    series so the direction dtheta/theta never appears as 0/0.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    th = float(np.linalg.norm(dtheta))
    if th < _SMALL_ANGLE:
        w = 1.0 - th * th / 8.0
        s = 0.5 - th * th / 48.0
    else:
        w = np.cos(0.5 * th)
        s = np.sin(0.5 * th) / th
    q = np.array([w, s * dtheta[0], s * dtheta[1], s * dtheta[2]])
    return quat_normalize(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion, magnitude in [0, pi]."""
    w = float(q[0])
    v = np.asarray(q[1:4], dtype=float)
    s = float(np.linalg.norm(v))
    if s < _SMALL_ANGLE:
        # sign(w) keeps q and -q on the same sheet
        return (2.0 / w) * v if w != 0.0 else np.zeros(3)
    angle = 2.0 * np.arctan2(s, w)
    if angle > np.pi:
        angle -= 2.0 * np.pi
    return (angle / s) * v


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v by q (body-to-world when q is a base attitude)."""
    return quat_to_matrix(q) @ np.asarray(v, dtype=float)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis XYZ (URDF rpy) to quaternion."""
    qx = quat_exp(np.array([roll, 0.0, 0.0]))
    qy = quat_exp(np.array([0.0, pitch, 0.0]))
    qz = quat_exp(np.array([0.0, 0.0, yaw]))
    return quat_mul(qz, quat_mul(qy, qx))


@dataclass
class State:
    """Full-order robot state: configuration q and tangent velocity v.

    q = [base pos (3), base quat wxyz (4), joints (n_j)]
    v = [base linear, world (3), base angular, body (3), joint rates (n_j)]
    """

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.q.shape != (self.v.shape[0] + 1,):
            raise ValueError(
                f"state dims inconsistent: n_q={self.q.shape[0]}, n_v={self.v.shape[0]}"
            )

    @property
    def n_v(self) -> int:
        return self.v.shape[0]

    @property
    def base_pos(self) -> np.ndarray:
        return self.q[0:3]

    @property
    def base_quat(self) -> np.ndarray:
        return self.q[3:7]

    @property
    def joints(self) -> np.ndarray:
        return self.q[7:]

    def copy(self) -> "State":
        return State(self.q.copy(), self.v.copy())


def config_oplus(q: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Right-perturb a configuration by a tangent vector."""
    if dq.shape[0] != q.shape[0] - 1:
        raise ValueError(f"tangent dim {dq.shape[0]} != n_v {q.shape[0] - 1}")
    out = np.empty_like(q)
    out[0:3] = q[0:3] + dq[0:3]
    out[3:7] = quat_mul(q[3:7], quat_exp(dq[3:6]))
    out[3:7] /= np.linalg.norm(out[3:7])
    out[7:] = q[7:] + dq[6:]
    return out


def config_ominus(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Tangent vector d with qb (+) d = qa."""
    if qa.shape != qb.shape:
        raise ValueError("configuration dims differ")
    n_v = qa.shape[0] - 1
    out = np.empty(n_v)
    out[0:3] = qa[0:3] - qb[0:3]
    out[3:6] = quat_log(quat_mul(quat_conj(qb[3:7]), qa[3:7]))
    out[6:] = qa[7:] - qb[7:]
    return out


def state_oplus(x: State, dx: np.ndarray) -> State:
    """Perturb a state: linear addition everywhere except the base
    quaternion, which composes q * Exp(dtheta)."""
    n_v = x.n_v
    dx = np.asarray(dx, dtype=float)
    if dx.shape[0] != 2 * n_v:
        raise ValueError(f"delta dim {dx.shape[0]} != 2*n_v {2 * n_v}")
    return State(config_oplus(x.q, dx[:n_v]), x.v + dx[n_v:])


def state_ominus(a: State, b: State) -> np.ndarray:
    """Tangent difference d with b (+) d = a."""
    if a.n_v != b.n_v:
        raise ValueError("state dims differ")
    return np.concatenate([config_ominus(a.q, b.q), a.v - b.v])


def oplus_jacobian(x: State, step: float = 1e-6) -> np.ndarray:
    """Derivative of dx -> (x (+) dx) (-) x at dx = 0, by central differences.

    With matching right conventions on both operators this is the identity;
    it is computed rather than assumed so the cost assembly can be checked
    against it.
    """
    n = 2 * x.n_v
    J = np.empty((n, n))
    dx = np.zeros(n)
    for i in range(n):
        dx[i] = step
        plus = state_ominus(state_oplus(x, dx), x)
        dx[i] = -step
        minus = state_ominus(state_oplus(x, dx), x)
        dx[i] = 0.0
        J[:, i] = (plus - minus) / (2.0 * step)
    return J
