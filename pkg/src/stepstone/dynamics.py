"""Kinematic-tree robot model and rigid-body dynamics.

The model is loaded from a JSON description (explicit joint placements,
no URDF) and packed into flat arrays consumed by the numba kernels in
``_kernels``. Inverse dynamics is a recursive Newton-Euler pass with
external end-effector forces; all derivatives are central finite
differences taken through the tangent-space perturbation ``config_oplus``.

Generalized-force layout mirrors the velocity layout: rows 0-2 world-frame
base force, rows 3-5 body-frame base torque, remaining rows actuated joint
torques. The base rows are the residual wrench and are kept in the output
so the transcription can drive them to zero through the contact forces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .liegroup import State, quat_from_rpy, quat_to_matrix

GRAVITY = 9.81


@dataclass
class Body:
    name: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray


@dataclass
class Joint:
    name: str
    parent: str
    child: str
    axis: np.ndarray
    origin_xyz: np.ndarray
    origin_rpy: np.ndarray


@dataclass
class EndEffector:
    body: str
    offset: np.ndarray


@dataclass
class CollisionPair:
    frame_a: str
    offset_a: np.ndarray
    radius_a: float
    frame_b: str
    offset_b: np.ndarray
    radius_b: float


@dataclass
class Limits:
    q_lb: np.ndarray
    q_ub: np.ndarray
    v_lb: np.ndarray
    v_ub: np.ndarray
    tau_lb: np.ndarray
    tau_ub: np.ndarray


class RobotModel:
    """Immutable tree-structured floating-base model.

    Bodies are re-packed in topological order at load time; all packed
    arrays (used by the kernels) follow that order. Joint coordinate i
    belongs to packed body i+1.
    """

    def __init__(self, name, bodies, joints, end_effectors, limits,
                 collision_pairs=None, nominal=None, gravity=GRAVITY):
        self.name = name
        self.gravity = float(gravity)
        self._validate_tree(bodies, joints)
        order = self._topo_order(bodies, joints)
        self.bodies = [bodies[i] for i in order]
        by_child = {j.child: j for j in joints}
        self.joints = [by_child[b.name] for b in self.bodies[1:]]
        self.joint_names = [j.name for j in self.joints]
        self.end_effectors = list(end_effectors)
        self.collision_pairs = list(collision_pairs or [])
        # limits and nominal joints arrive in the declared revolute-joint
        # order; store everything in packed order
        declared = [j.name for j in joints]
        perm = np.array([declared.index(n) for n in self.joint_names],
                        dtype=np.int64)
        for f in ("q_lb", "q_ub", "v_lb", "v_ub", "tau_lb", "tau_ub"):
            if np.asarray(getattr(limits, f)).shape != (len(joints),):
                raise ValueError("limit arrays must match the actuated joint count")
        self.limits = Limits(*(np.asarray(getattr(limits, f), float)[perm]
                               for f in ("q_lb", "q_ub", "v_lb", "v_ub",
                                         "tau_lb", "tau_ub")))
        self.nominal = dict(nominal or {})
        if "joint_angles" in self.nominal:
            self.nominal["joint_angles"] = list(
                np.asarray(self.nominal["joint_angles"], float)[perm])

        self.n_joints = len(self.joints)
        self.n_v = 6 + self.n_joints
        self.n_q = self.n_v + 1
        self.n_ee = len(self.end_effectors)

        body_index = {b.name: i for i, b in enumerate(self.bodies)}
        nb = len(self.bodies)
        self._parent = np.empty(nb, dtype=np.int64)
        self._parent[0] = -1
        self._jR = np.zeros((nb, 3, 3))
        self._jR[0] = np.eye(3)
        self._jt = np.zeros((nb, 3))
        self._jaxis = np.zeros((nb, 3))
        for i, j in enumerate(self.joints, start=1):
            self._parent[i] = body_index[j.parent]
            self._jR[i] = quat_to_matrix(quat_from_rpy(*j.origin_rpy))
            self._jt[i] = j.origin_xyz
            ax = np.asarray(j.axis, dtype=float)
            self._jaxis[i] = ax / np.linalg.norm(ax)
        self._mass = np.array([b.mass for b in self.bodies])
        self._com = np.array([b.com for b in self.bodies])
        self._inertia = np.array([b.inertia for b in self.bodies])
        self._ee_body = np.array([body_index[e.body] for e in self.end_effectors],
                                 dtype=np.int64)
        self._ee_off = np.array([e.offset for e in self.end_effectors],
                                dtype=float).reshape(-1, 3)

        # collision endpoints appended after the end-effector points
        pts_body = list(self._ee_body)
        pts_off = [np.asarray(e.offset, dtype=float) for e in self.end_effectors]
        for p in self.collision_pairs:
            pts_body += [body_index[p.frame_a], body_index[p.frame_b]]
            pts_off += [np.asarray(p.offset_a, float), np.asarray(p.offset_b, float)]
        self._pt_body = np.array(pts_body, dtype=np.int64)
        self._pt_off = np.array(pts_off, dtype=float).reshape(-1, 3)

    @staticmethod
    def _validate_tree(bodies, joints):
        names = [b.name for b in bodies]
        if len(set(names)) != len(names):
            raise ValueError("duplicate body names")
        children = [j.child for j in joints]
        if len(set(children)) != len(children):
            raise ValueError("a body is the child of more than one joint")
        roots = set(names) - set(children)
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root body, found {sorted(roots)}")
        for b in bodies:
            if b.mass <= 0:
                raise ValueError(f"body {b.name} has non-positive mass")
            I = np.asarray(b.inertia)
            if not np.allclose(I, I.T, atol=1e-12):
                raise ValueError(f"body {b.name} inertia not symmetric")
            if np.any(np.linalg.eigvalsh(I) <= 0):
                raise ValueError(f"body {b.name} inertia not positive definite")

    @staticmethod
    def _topo_order(bodies, joints):
        # depth-first in declaration order keeps each chain contiguous, so
        # the packed joint order matches the file's revolute-joint order for
        # the usual per-leg layout
        names = [b.name for b in bodies]
        children = {j.child for j in joints}
        root = next(n for n in names if n not in children)
        kids = {}
        for j in joints:
            kids.setdefault(j.parent, []).append(j.child)
        idx = {n: i for i, n in enumerate(names)}
        order = []

        def visit(n):
            order.append(idx[n])
            for c in kids.get(n, []):
                visit(c)

        visit(root)
        if len(order) != len(bodies):
            raise ValueError("model graph is not a connected tree")
        return order

    @classmethod
    def from_dict(cls, d: dict, gravity: float = GRAVITY) -> "RobotModel":
        bodies = [Body(b["name"], float(b["mass"]), np.asarray(b["com"], float),
                       np.asarray(b["inertia"], float)) for b in d["bodies"]]
        joints = []
        floating = None
        for j in d["joints"]:
            if j["type"] == "floating":
                floating = j
                continue
            if j["type"] != "revolute":
                raise ValueError(f"unsupported joint type {j['type']}")
            origin = j.get("origin", {})
            joints.append(Joint(j["name"], j["parent"], j["child"],
                                np.asarray(j["axis"], float),
                                np.asarray(origin.get("xyz", [0, 0, 0]), float),
                                np.asarray(origin.get("rpy", [0, 0, 0]), float)))
        if floating is None:
            raise ValueError("model must declare a floating root joint")
        ees = [EndEffector(e["body"], np.asarray(e["offset"], float))
               for e in d["end_effectors"]]
        lim = d["limits"]
        limits = Limits(*(np.asarray(lim[k], float) for k in
                          ("q_lb", "q_ub", "v_lb", "v_ub", "tau_lb", "tau_ub")))
        pairs = [CollisionPair(p["frame_a"], np.asarray(p["offset_a"], float),
                               float(p["R_a"]), p["frame_b"],
                               np.asarray(p["offset_b"], float), float(p["R_b"]))
                 for p in d.get("collision_pairs", [])]
        return cls(d.get("name", "robot"), bodies, joints, ees, limits, pairs,
                   nominal=d.get("nominal"), gravity=gravity)

    @classmethod
    def from_json(cls, path, gravity: float = GRAVITY) -> "RobotModel":
        with open(path) as f:
            return cls.from_dict(json.load(f), gravity=gravity)

    # -- convenience ------------------------------------------------------

    def nominal_state(self) -> State:
        q = np.zeros(self.n_q)
        q[3] = 1.0
        q[2] = float(self.nominal.get("base_height", 0.0))
        joints = self.nominal.get("joint_angles")
        if joints is not None:
            q[7:] = np.asarray(joints, float)
        return State(q, np.zeros(self.n_v))

    def total_mass(self) -> float:
        return float(self._mass.sum())

    def _check_state_dims(self, q, v=None):
        if q.shape[-1] != self.n_q:
            raise ValueError(f"configuration dim {q.shape[-1]} != n_q {self.n_q}")
        if v is not None and v.shape[-1] != self.n_v:
            raise ValueError(f"velocity dim {v.shape[-1]} != n_v {self.n_v}")


# -- evaluation -----------------------------------------------------------


def _grav_vec(model):
    return np.array([0.0, 0.0, -model.gravity])


def inverse_dynamics(model: RobotModel, q: np.ndarray, v: np.ndarray,
                     a: np.ndarray, forces: np.ndarray) -> np.ndarray:
    """Generalized forces for the motion (q, v, a) under end-effector forces.

    Rows 0-5 are the residual base wrench; the remaining rows are the
    actuated joint torques. ``forces`` is (n_ee, 3), world frame, applied
    at the end-effector points.
    """
    model._check_state_dims(q, v)
    if a.shape != (model.n_v,):
        raise ValueError("acceleration must be a tangent vector")
    if forces.shape != (model.n_ee, 3):
        raise ValueError(f"forces must be ({model.n_ee}, 3)")
    tau = _kernels.rnea_batch(
        q[None, :], v[None, :], a[None, :], forces[None, :, :],
        model._parent, model._jR, model._jt, model._jaxis,
        model._mass, model._com, model._inertia,
        model._ee_body, model._ee_off, _grav_vec(model))
    return tau[0]


def inverse_dynamics_batch(model, q, v, a, forces):
    return _kernels.rnea_batch(q, v, a, forces,
                               model._parent, model._jR, model._jt, model._jaxis,
                               model._mass, model._com, model._inertia,
                               model._ee_body, model._ee_off, _grav_vec(model))


def _points_batch(model, q, v):
    return _kernels.points_batch(q, v, model._parent, model._jR, model._jt,
                                 model._jaxis, model._pt_body, model._pt_off)


def forward_kinematics(model: RobotModel, q: np.ndarray, ee_index: int) -> np.ndarray:
    """World position of one end-effector point."""
    model._check_state_dims(q)
    if not 0 <= ee_index < model.n_ee:
        raise IndexError(f"end effector {ee_index} out of range")
    pp, _ = _points_batch(model, q[None, :], np.zeros((1, model.n_v)))
    return pp[0, ee_index]


def ee_positions(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """World positions of all end effectors, (n_ee, 3)."""
    model._check_state_dims(q)
    pp, _ = _points_batch(model, q[None, :], np.zeros((1, model.n_v)))
    return pp[0, : model.n_ee]


def ee_velocity(model: RobotModel, q: np.ndarray, v: np.ndarray,
                ee_index: int) -> np.ndarray:
    """World linear velocity of one end-effector point."""
    model._check_state_dims(q, v)
    if not 0 <= ee_index < model.n_ee:
        raise IndexError(f"end effector {ee_index} out of range")
    _, pv = _points_batch(model, q[None, :], v[None, :])
    return pv[0, ee_index]


def ee_states(model: RobotModel, q: np.ndarray, v: np.ndarray):
    """Positions and velocities of all tracked points (ee + collision)."""
    pp, pv = _points_batch(model, q[None, :], v[None, :])
    return pp[0], pv[0]


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Joint-space inertia via unit-acceleration inverse-dynamics columns."""
    nv = model.n_v
    qb = np.repeat(q[None, :], nv + 1, axis=0)
    vb = np.zeros((nv + 1, nv))
    ab = np.zeros((nv + 1, nv))
    ab[1:] = np.eye(nv)
    fb = np.zeros((nv + 1, model.n_ee, 3))
    tau = inverse_dynamics_batch(model, qb, vb, ab, fb)
    M = (tau[1:] - tau[0]).T
    return 0.5 * (M + M.T)


def nonlinear_bias(model: RobotModel, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Coriolis, centrifugal and gravity terms h(q, v)."""
    return inverse_dynamics(model, q, v, np.zeros(model.n_v),
                            np.zeros((model.n_ee, 3)))


def forward_dynamics(model: RobotModel, q: np.ndarray, v: np.ndarray,
                     tau_act: np.ndarray, forces: np.ndarray) -> np.ndarray:
    """Tangent acceleration under actuated torques and end-effector forces."""
    rhs = -inverse_dynamics(model, q, v, np.zeros(model.n_v), forces)
    rhs[6:] += tau_act
    M = mass_matrix(model, q)
    return np.linalg.solve(M, rhs)


# -- finite-difference derivatives ----------------------------------------

FD_STEP = 1e-6


@dataclass
class IdDerivatives:
    """Linearization of inverse dynamics at one trajectory node.

    The acceleration is the finite difference (v_next - v)/dt, so the
    velocity Jacobian includes the -1/dt acceleration contribution and the
    v_next Jacobian is the mass matrix scaled by 1/dt.
    """

    value: np.ndarray        # f(q, v, a, F), (n_v,)
    d_dq: np.ndarray         # (n_v, n_v)
    d_dv: np.ndarray
    d_dvn: np.ndarray
    d_dF: np.ndarray         # (n_v, 3*n_ee)


@dataclass
class KinDerivatives:
    """Point kinematics and tangent-space Jacobians at one node."""

    pos: np.ndarray          # (n_pt, 3) world positions (ee first, then collision)
    vel: np.ndarray          # (n_pt, 3)
    pos_dq: np.ndarray       # (n_pt, 3, n_v)
    vel_dq: np.ndarray
    vel_dv: np.ndarray


def _fd_steps(ref: np.ndarray, h: float) -> np.ndarray:
    return h * np.maximum(1.0, np.abs(ref))


def _perturbed_configs(q: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """(2*n_v, n_q) configs perturbed by +/-step along each tangent axis,
    interleaved (+0, -0, +1, -1, ...). Vectorized except the 6 quaternion
    rows, which are exact axis-aligned exponentials."""
    nv = steps.shape[0]
    out = np.repeat(q[None, :], 2 * nv, axis=0)
    for i in range(3):  # base position block, linear
        out[2 * i, i] += steps[i]
        out[2 * i + 1, i] -= steps[i]
    w, x, y, z = q[3:7]
    for i in range(3):  # base rotation block: q * Exp(+/- h e_i)
        h2 = 0.5 * steps[3 + i]
        c, s = np.cos(h2), np.sin(h2)
        for r, sg in ((2 * (3 + i), s), (2 * (3 + i) + 1, -s)):
            if i == 0:
                out[r, 3:7] = (c * w - sg * x, c * x + sg * w,
                               c * y + sg * z, c * z - sg * y)
            elif i == 1:
                out[r, 3:7] = (c * w - sg * y, c * x - sg * z,
                               c * y + sg * w, c * z + sg * x)
            else:
                out[r, 3:7] = (c * w - sg * z, c * x + sg * y,
                               c * y - sg * x, c * z + sg * w)
    for i in range(6, nv):  # joints, linear
        out[2 * i, i + 1] += steps[i]
        out[2 * i + 1, i + 1] -= steps[i]
    return out


def id_derivatives(model: RobotModel, q, v, v_next, dt, forces,
                   h: float = FD_STEP) -> IdDerivatives:
    """Central-difference Jacobians of inverse dynamics wrt (dq, dv, dv+, dF)."""
    nv, nee = model.n_v, model.n_ee
    a0 = (v_next - v) / dt
    ncol = nv + nv + nv + 3 * nee
    B = 1 + 2 * ncol
    qb = np.repeat(q[None, :], B, axis=0)
    vb = np.repeat(v[None, :], B, axis=0)
    ab = np.repeat(a0[None, :], B, axis=0)
    fb = np.repeat(forces[None, :, :], B, axis=0)

    hq = _fd_steps(np.zeros(nv), h)
    hv = _fd_steps(v, h)
    hvn = _fd_steps(v_next, h)
    hF = _fd_steps(forces.ravel(), h)

    qb[1: 1 + 2 * nv] = _perturbed_configs(q, hq)
    sl = slice(1 + 2 * nv, 1 + 4 * nv)
    pm = np.zeros((2 * nv, nv))
    pm[0::2] = np.diag(hv)
    pm[1::2] = -np.diag(hv)
    vb[sl] += pm
    ab[sl] -= pm / dt
    sl = slice(1 + 4 * nv, 1 + 6 * nv)
    pm = np.zeros((2 * nv, nv))
    pm[0::2] = np.diag(hvn)
    pm[1::2] = -np.diag(hvn)
    ab[sl] += pm / dt
    sl = slice(1 + 6 * nv, 1 + 6 * nv + 6 * nee)
    pf = np.zeros((6 * nee, 3 * nee))
    pf[0::2] = np.diag(hF)
    pf[1::2] = -np.diag(hF)
    fb[sl] += pf.reshape(6 * nee, nee, 3)

    tau = inverse_dynamics_batch(model, qb, vb, ab, fb)
    if not np.all(np.isfinite(tau)):
        raise FloatingPointError("non-finite inverse-dynamics output during FD")

    def cols(offset, steps):
        n = steps.shape[0]
        block = tau[1 + 2 * offset: 1 + 2 * (offset + n)]
        return ((block[0::2] - block[1::2]) / (2.0 * steps[:, None])).T

    return IdDerivatives(
        value=tau[0],
        d_dq=cols(0, hq),
        d_dv=cols(nv, hv),
        d_dvn=cols(2 * nv, hvn),
        d_dF=cols(3 * nv, hF),
    )


def kin_derivatives(model: RobotModel, q, v, h: float = FD_STEP) -> KinDerivatives:
    """Point positions/velocities and their tangent Jacobians."""
    nv = model.n_v
    B = 1 + 4 * nv
    qb = np.repeat(q[None, :], B, axis=0)
    vb = np.repeat(v[None, :], B, axis=0)
    hq = _fd_steps(np.zeros(nv), h)
    hv = _fd_steps(v, h)
    qb[1: 1 + 2 * nv] = _perturbed_configs(q, hq)
    sl = slice(1 + 2 * nv, 1 + 4 * nv)
    pm = np.zeros((2 * nv, nv))
    pm[0::2] = np.diag(hv)
    pm[1::2] = -np.diag(hv)
    vb[sl] += pm
    pp, pv = _points_batch(model, qb, vb)
    npt = pp.shape[1]

    def jac(vals, offset, steps):
        block = vals[1 + 2 * offset: 1 + 2 * (offset + steps.shape[0])]
        d = (block[0::2] - block[1::2]) / (2.0 * steps[:, None, None])
        return np.moveaxis(d, 0, 2)  # (npt, 3, n)

    return KinDerivatives(
        pos=pp[0], vel=pv[0],
        pos_dq=jac(pp, 0, hq),
        vel_dq=jac(pv, 0, hq),
        vel_dv=jac(pv, nv, hv),
    )


def load_quadruped() -> RobotModel:
    """The bundled 18-velocity-DoF reference quadruped (12 actuated joints)."""
    path = Path(__file__).parent / "data" / "quadruped.json"
    return RobotModel.from_json(path)
