"""Block LQ approximation of the fixed-mode trajectory NLP.

One SQP iterate around the current trajectory guess: explicit linearized
inverse-dynamics rows, tangent-space integration rows, Gauss-Newton cost
blocks, and all stage constraints (boxes, linearized friction pyramid,
collision spheres, foothold polytopes, swing height, no-slip). Soft rows
(polytope + swing height) receive L1-penalized slack variables appended
to the stage inputs, so iteration-capped solves tolerate mild
infeasibility instead of failing.

The emitted QP structure (row/column counts per stage) depends only on
the contact pattern at the node times, which is constant while a periodic
gait rolls forward; values change between builds, the sparsity does not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotModel, id_derivatives, kin_derivatives
from .liegroup import (
    State,
    config_ominus,
    config_oplus,
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
)
from .qpsolver import INF, OcpQp

DEFAULT_NODE_DURATIONS = np.array([0.015] * 5 + [0.035] * 20)


def _quantize(t: float) -> float:
    return round(t * 1e6) / 1e6


@dataclass
class ContactSchedule:
    """Per-end-effector stance timing: an initial full stance, then a
    periodic gait. Stance flags are fixed data, never optimized.

    Foot l is in stance at time t when t < stand_until or when
    (t - stand_until - offset[l]) mod period falls inside [0, stance[l]).
    """

    n_ee: int
    stand_until: float = 0.0
    period: float = 0.6
    offsets: np.ndarray = None
    stance_time: np.ndarray = None

    def __post_init__(self):
        if self.offsets is None:
            self.offsets = np.zeros(self.n_ee)
        if self.stance_time is None:
            self.stance_time = np.full(self.n_ee, self.period)
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.stance_time = np.asarray(self.stance_time, dtype=float)

    @classmethod
    def stand(cls, n_ee: int) -> "ContactSchedule":
        return cls(n_ee=n_ee, stand_until=math.inf)

    @classmethod
    def trot(cls, stance_s: float = 0.3, swing_s: float = 0.3,
             stand_until: float = 0.5, n_ee: int = 4) -> "ContactSchedule":
        """Diagonal-pair trot: (FL, RR) then (FR, RL)."""
        period = stance_s + swing_s
        off = np.array([0.0, stance_s, stance_s, 0.0])
        return cls(n_ee=n_ee, stand_until=stand_until, period=period,
                   offsets=off, stance_time=np.full(n_ee, stance_s))

    def in_stance(self, foot: int, t: float) -> bool:
        t = _quantize(t)
        if t < self.stand_until:
            return True
        tau = _quantize((t - self.stand_until - self.offsets[foot])
                        % self.period)
        return tau < self.stance_time[foot] - 1e-9 or tau > self.period - 1e-9

    def stance_phase_id(self, foot: int, t: float):
        """Identifier of the stance phase active at t, or None in swing.
        Phase 0 is the initial stand; cycle n maps to phase n + 1."""
        t = _quantize(t)
        if t < self.stand_until:
            return 0
        rel = t - self.stand_until - self.offsets[foot]
        n = math.floor(_quantize(rel) / self.period + 1e-9)
        tau = _quantize(rel - n * self.period)
        if -1e-9 <= tau < self.stance_time[foot] - 1e-9:
            return int(n) + 1
        return None

    def stance_interval(self, foot: int, phase_id: int):
        """[touchdown, liftoff) of one stance phase. Phase 0 is the initial
        stand and nominally ends when the gait starts."""
        if phase_id == 0:
            return -math.inf, self.stand_until
        start = self.stand_until + self.offsets[foot] + (phase_id - 1) * self.period
        return start, start + self.stance_time[foot]

    def phases_in_window(self, foot: int, t0: float, t1: float):
        """(phase_id, touchdown, liftoff) of stance phases meeting [t0, t1]."""
        out = []
        if math.isinf(self.stand_until):
            return [(0, -math.inf, math.inf)]
        if t0 < self.stand_until:
            out.append((0, -math.inf, self.stand_until))
        n0 = max(0, math.floor((t0 - self.stand_until - self.offsets[foot])
                               / self.period - 1))
        n = n0
        while True:
            td = self.stand_until + self.offsets[foot] + n * self.period
            lo = td + self.stance_time[foot]
            if td > t1 + 1e-9:
                break
            if lo > t0 - 1e-9:
                out.append((n + 1, td, lo))
            n += 1
        return out

    def swing_interval(self, foot: int, t: float):
        """(liftoff, next touchdown) of the swing containing t, or None."""
        if self.in_stance(foot, t):
            return None
        t = _quantize(t)
        rel = t - self.stand_until - self.offsets[foot]
        n = math.floor(rel / self.period + 1e-9)
        lo = self.stand_until + self.offsets[foot] + n * self.period \
            + self.stance_time[foot]
        td = self.stand_until + self.offsets[foot] + (n + 1) * self.period
        return lo, td

    def contact_flags(self, times) -> np.ndarray:
        """(len(times), n_ee) stance booleans at the given times."""
        return np.array([[self.in_stance(l, t) for l in range(self.n_ee)]
                         for t in times])


def _interp_tangent(qa, qb, s):
    return config_oplus(qa, s * config_ominus(qb, qa))


@dataclass
class TrajectoryGuess:
    """Per-node linearization point plus node durations. The object the
    real-time iteration shifts in time and refines by one QP step."""

    qs: np.ndarray        # (N+1, n_q)
    vs: np.ndarray        # (N+1, n_v)
    taus: np.ndarray      # (N, n_joints)
    forces: np.ndarray    # (N, n_ee, 3)
    dts: np.ndarray       # (N,)
    t0: float = 0.0

    @property
    def N(self) -> int:
        return self.dts.shape[0]

    @property
    def node_times(self) -> np.ndarray:
        return self.t0 + np.concatenate([[0.0], np.cumsum(self.dts)])

    def state(self, k: int) -> State:
        return State(self.qs[k], self.vs[k])

    def copy(self) -> "TrajectoryGuess":
        return TrajectoryGuess(self.qs.copy(), self.vs.copy(), self.taus.copy(),
                               self.forces.copy(), self.dts.copy(), self.t0)

    @classmethod
    def stand(cls, model: RobotModel, state: State, t0: float = 0.0,
              dts: np.ndarray = None) -> "TrajectoryGuess":
        """Constant standing trajectory with gravity-compensating forces."""
        dts = DEFAULT_NODE_DURATIONS.copy() if dts is None else np.asarray(dts)
        N = dts.shape[0]
        from .dynamics import inverse_dynamics  # local to avoid cycle at import

        W = model.total_mass() * model.gravity
        F = np.tile([0.0, 0.0, W / model.n_ee], (model.n_ee, 1))
        tau = inverse_dynamics(model, state.q, np.zeros(model.n_v),
                               np.zeros(model.n_v), F)[6:]
        return cls(
            qs=np.tile(state.q, (N + 1, 1)),
            vs=np.tile(state.v, (N + 1, 1)),
            taus=np.tile(tau, (N, 1)),
            forces=np.tile(F, (N, 1, 1)),
            dts=dts, t0=t0)

    def shifted(self, new_t0: float) -> "TrajectoryGuess":
        """Resample at the shifted node grid; hold the last node beyond
        the old horizon (shift-and-hold warm start)."""
        if new_t0 == self.t0:
            return self.copy()
        old = self.node_times
        out = self.copy()
        out.t0 = new_t0
        new_times = new_t0 + np.concatenate([[0.0], np.cumsum(self.dts)])
        for i, t in enumerate(new_times):
            if t >= old[-1]:
                out.qs[i] = self.qs[-1]
                out.vs[i] = self.vs[-1]
            else:
                j = int(np.searchsorted(old, t, side="right") - 1)
                j = min(max(j, 0), self.N - 1)
                s = (t - old[j]) / (old[j + 1] - old[j])
                out.qs[i] = _interp_tangent(self.qs[j], self.qs[j + 1], s)
                out.vs[i] = (1 - s) * self.vs[j] + s * self.vs[j + 1]
        # inputs are piecewise constant per interval
        mid = 0.5 * (new_times[:-1] + new_times[1:])
        for i, t in enumerate(mid):
            j = int(np.searchsorted(old[1:], t, side="right"))
            j = min(j, self.N - 1)
            out.taus[i] = self.taus[j]
            out.forces[i] = self.forces[j]
        return out

    def apply_step(self, dx: np.ndarray, du: np.ndarray) -> "TrajectoryGuess":
        """Full Newton step (no line search): x (+) dx per node, u + du."""
        out = self.copy()
        nv = self.vs.shape[1]
        nj = self.taus.shape[1]
        for k in range(self.N + 1):
            out.qs[k] = config_oplus(self.qs[k], dx[k, :nv])
            out.vs[k] = self.vs[k] + dx[k, nv:]
        for k in range(self.N):
            out.taus[k] = self.taus[k] + du[k, :nj]
            out.forces[k] = self.forces[k] + du[k, nj:nj + 3 * out.forces.shape[1]
                                                ].reshape(-1, 3)
        return out


@dataclass
class CostReferences:
    """Desired states/inputs/end-effector positions and diagonal weights."""

    q_ref: np.ndarray       # (N+1, n_q)
    v_ref: np.ndarray       # (N+1, n_v)
    tau_ref: np.ndarray     # (N, n_joints)
    F_ref: np.ndarray       # (N, n_ee, 3)
    r_ref: np.ndarray       # (N, n_ee, 3)
    w_x: np.ndarray         # (2 n_v,)
    w_u: np.ndarray         # (n_joints + 3 n_ee,)
    w_r: np.ndarray         # (3,)
    w_xN: np.ndarray        # (2 n_v,)
    terminal_weight: float = 1.0

    def state_error(self, guess: TrajectoryGuess, k: int) -> np.ndarray:
        """x_ref_k (-) x_k, tangent coordinates."""
        dq = config_ominus(self.q_ref[k], guess.qs[k])
        return np.concatenate([dq, self.v_ref[k] - guess.vs[k]])


@dataclass
class TranscriptionConfig:
    mu: float = 0.7
    f_min: float = 10.0
    f_max: float = 250.0
    eps_z: float = 0.005
    slack_weight: float = 1.0e4
    swing_clearance: float = 0.08
    swing_height_from_node: int = 2  # first horizon node with a swing-height row
    polytope_rows: int = 4  # x-y rows per foothold group, padded for fixed structure


@dataclass
class StageContext:
    """Per-build snapshot of everything besides the guess itself."""

    gamma: np.ndarray            # (N+1, n_ee) stance flags at node times
    phase_ids: np.ndarray        # (N+1, n_ee) stance phase id or -1
    current_contact: np.ndarray  # (n_ee,) stance at the measurement time
    current_phase: np.ndarray    # (n_ee,) phase id at measurement (-1 in swing)
    z_des: np.ndarray            # (N+1, n_ee) swing-height targets (NaN = none)


def make_stage_context(schedule: ContactSchedule, times: np.ndarray,
                       z_des: np.ndarray) -> StageContext:
    n_ee = schedule.n_ee
    K = len(times)
    gamma = np.zeros((K, n_ee), dtype=bool)
    phase = -np.ones((K, n_ee), dtype=np.int64)
    for k, t in enumerate(times):
        for l in range(n_ee):
            pid = schedule.stance_phase_id(l, t)
            if pid is not None:
                gamma[k, l] = True
                phase[k, l] = pid
    return StageContext(
        gamma=gamma, phase_ids=phase,
        current_contact=gamma[0].copy(), current_phase=phase[0].copy(),
        z_des=z_des)


def swing_z_profile(t, t_lift, t_touch, z_from, z_to, clearance):
    """Piecewise-quadratic swing height: zero-slope apex at mid-swing,
    apex `clearance` above the higher of the two stance heights."""
    apex = max(z_from, z_to) + clearance
    t_mid = 0.5 * (t_lift + t_touch)
    if t <= t_mid:
        span = max(t_mid - t_lift, 1e-9)
        s = (t - t_mid) / span
        return apex + (z_from - apex) * s * s
    span = max(t_touch - t_mid, 1e-9)
    s = (t - t_mid) / span
    return apex + (z_to - apex) * s * s


@dataclass
class NodeLin:
    idd: object = None   # IdDerivatives at (node k, k+1)
    kin: object = None   # KinDerivatives at node k


class Transcription:
    """Builds the stagewise QP for one model + configuration."""

    def __init__(self, model: RobotModel, config: TranscriptionConfig = None):
        self.model = model
        self.config = config or TranscriptionConfig()
        self.n_v = model.n_v
        self.n_joints = model.n_joints
        self.n_ee = model.n_ee
        self.n_dx = 2 * model.n_v
        self.n_u0 = model.n_joints + 3 * model.n_ee  # inputs before slacks

    # -- node linearizations ------------------------------------------------

    def node_lin(self, guess: TrajectoryGuess, k: int,
                 with_dynamics: bool = True) -> NodeLin:
        nl = NodeLin()
        nl.kin = kin_derivatives(self.model, guess.qs[k], guess.vs[k])
        if with_dynamics and k < guess.N:
            nl.idd = id_derivatives(self.model, guess.qs[k], guess.vs[k],
                                    guess.vs[k + 1], guess.dts[k],
                                    guess.forces[k])
        return nl

    # -- dynamics rows ------------------------------------------------------

    def linearize_dynamics(self, guess: TrajectoryGuess, k: int,
                           idd=None):
        """Explicit update rows for dv_{k+1}: (A_v, B_v, b_v).

        A_v: (n_v, 2 n_v), B_v: (n_v, n_u0), b_v: (n_v,). The base rows of
        the inverse-dynamics residual ride along with the actuated rows;
        the target generalized force is [0_6; tau_k].
        """
        nv, nj = self.n_v, self.n_joints
        if idd is None:
            idd = id_derivatives(self.model, guess.qs[k], guess.vs[k],
                                 guess.vs[k + 1], guess.dts[k], guess.forces[k])
        Jn = idd.d_dvn
        try:
            Kinv = np.linalg.inv(Jn)
        except np.linalg.LinAlgError as e:
            raise RuntimeError(f"singular dv+ Jacobian at node {k}: corrupt "
                               f"trajectory guess") from e
        A = np.empty((nv, self.n_dx))
        A[:, :nv] = -Kinv @ idd.d_dq
        A[:, nv:] = -Kinv @ idd.d_dv
        B = np.empty((nv, self.n_u0))
        B[:, :nj] = Kinv[:, 6:]
        B[:, nj:] = -Kinv @ idd.d_dF
        tau_full = np.concatenate([np.zeros(6), guess.taus[k]])
        b = -Kinv @ (idd.value - tau_full)
        return A, B, b

    # -- integration rows ---------------------------------------------------

    def linearize_integration(self, guess: TrajectoryGuess, k: int,
                              fd_step: float = 1e-6):
        """Rows for dq_{k+1}: (A_q, b_q), the tangent-space linearization of
        q_{k+1} = q_k (+) v_k dt around the guess.

        Solving the linearized update for dq_{k+1} gives the explicit map
        dq+ = (qbar_k (+) dq (+) (vbar+dv) dt) (-) qbar_{k+1}; position and
        joint blocks of its Jacobian are exact (linear coordinates), the
        3x3 rotation blocks come from central differences through the
        quaternion chain.
        """
        nv = self.n_v
        dt = guess.dts[k]
        A = np.zeros((nv, self.n_dx))
        b = np.zeros(nv)
        # linear coordinates: dq+ = dq + dt dv - residual
        lin = np.concatenate([np.arange(0, 3), np.arange(6, nv)])
        A[lin, lin] = 1.0
        A[lin, nv + lin] = dt
        q_pred = guess.qs[k][0:3] + dt * guess.vs[k][0:3]
        b[0:3] = q_pred - guess.qs[k + 1][0:3]
        j_pred = guess.qs[k][7:] + dt * guess.vs[k][6:]
        b[6:] = j_pred - guess.qs[k + 1][7:]

        # rotation block of the explicit update
        qb = guess.qs[k][3:7]
        qb1_conj = quat_conj(guess.qs[k + 1][3:7])
        om = guess.vs[k][3:6]

        def rot_update(dth, dom):
            f_rot = quat_mul(quat_mul(qb, quat_exp(dth)),
                             quat_exp((om + dom) * dt))
            return quat_log(quat_mul(qb1_conj, f_rot))

        z = np.zeros(3)
        b[3:6] = rot_update(z, z)
        h = fd_step
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            A[3:6, 3 + i] = (rot_update(e, z) - rot_update(-e, z)) / (2 * h)
            A[3:6, nv + 3 + i] = (rot_update(z, e) - rot_update(z, -e)) / (2 * h)
        return A, b

    def dynamics_blocks(self, guess, k, idd=None):
        """Full stage transition (A, B, b) stacking dq and dv rows."""
        nv = self.n_v
        Aq, bq = self.linearize_integration(guess, k)
        Av, Bv, bv = self.linearize_dynamics(guess, k, idd)
        A = np.vstack([Aq, Av])
        B = np.vstack([np.zeros((nv, self.n_u0)), Bv])
        b = np.concatenate([bq, bv])
        return A, B, b

    # -- cost ---------------------------------------------------------------

    def build_cost(self, guess: TrajectoryGuess, refs: CostReferences,
                   kins: list):
        """Gauss-Newton stage blocks: (Q, q, R, r) lists over stages.

        State blocks use the tangent-chart Jacobian of (+), identity under
        the right-convention pairing, so they reduce to the weights; the
        end-effector term contributes J_r' W_r J_r in the dq block.
        """
        N = guess.N
        nv, ndx = self.n_v, self.n_dx
        Qs, qs_, Rs, rs = [], [], [], []
        for k in range(N + 1):
            if k < N:
                Q = np.diag(2.0 * refs.w_x)
                e = refs.state_error(guess, k)
                qlin = -2.0 * refs.w_x * e
                Wr = refs.w_r
                kin = kins[k]
                for l in range(self.n_ee):
                    J = kin.pos_dq[l]  # (3, n_v)
                    r_err = refs.r_ref[k, l] - kin.pos[l]
                    Q[:nv, :nv] += 2.0 * J.T @ (Wr[:, None] * J)
                    qlin[:nv] += -2.0 * J.T @ (Wr * r_err)
                R = np.diag(2.0 * refs.w_u)
                u_err = np.concatenate([refs.tau_ref[k] - guess.taus[k],
                                        (refs.F_ref[k] - guess.forces[k]).ravel()])
                rlin = -2.0 * refs.w_u * u_err
            else:
                eta = refs.terminal_weight
                Q = np.diag(2.0 * eta * refs.w_xN)
                e = refs.state_error(guess, k)
                qlin = -2.0 * eta * refs.w_xN * e
                R = np.zeros((self.n_u0, self.n_u0))
                rlin = np.zeros(self.n_u0)
            Qs.append(Q)
            qs_.append(qlin)
            Rs.append(R)
            rs.append(rlin)
        return Qs, qs_, Rs, rs

    def nonlinear_cost(self, guess: TrajectoryGuess,
                       refs: CostReferences) -> float:
        """The tracked nonlinear cost of a trajectory (not its QP model)."""
        from .dynamics import ee_positions

        total = 0.0
        for k in range(guess.N):
            e = refs.state_error(guess, k)
            total += float(e @ (refs.w_x * e))
            u_err = np.concatenate([refs.tau_ref[k] - guess.taus[k],
                                    (refs.F_ref[k] - guess.forces[k]).ravel()])
            total += float(u_err @ (refs.w_u * u_err))
            r = ee_positions(self.model, guess.qs[k])
            for l in range(self.n_ee):
                d = refs.r_ref[k, l] - r[l]
                total += float(d @ (refs.w_r * d))
        e = refs.state_error(guess, guess.N)
        total += refs.terminal_weight * float(e @ (refs.w_xN * e))
        return total

    # -- constraint rows ----------------------------------------------------

    def build_inequalities(self, guess, ctx: StageContext, kins,
                           bag) -> list:
        """Box, friction, collision and (soft) polytope rows per stage.

        Returns a list over stages of row tuples
        (cx, du, lo, hi, soft_tag) with soft_tag '' for hard rows; soft
        rows get slack columns during assembly. `bag` maps
        (foot, phase_id) -> FootholdAssignment.
        """
        N = guess.N
        rows = [[] for _ in range(N + 1)]
        lim = self.model.limits
        nv, nj, nee = self.n_v, self.n_joints, self.n_ee
        cfg = self.config
        for k in range(N + 1):
            rs = rows[k]
            q_j = guess.qs[k][7:]
            v_j = guess.vs[k][6:]
            # state boxes on actuated coordinates
            for j in range(nj):
                cx = np.zeros(self.n_dx)
                cx[6 + j] = 1.0
                rs.append((cx, None, lim.q_lb[j] - q_j[j],
                           lim.q_ub[j] - q_j[j], ""))
            for j in range(nj):
                cx = np.zeros(self.n_dx)
                cx[nv + 6 + j] = 1.0
                rs.append((cx, None, lim.v_lb[j] - v_j[j],
                           lim.v_ub[j] - v_j[j], ""))
            if k < N:
                # input boxes
                for j in range(nj):
                    du = np.zeros(self.n_u0)
                    du[j] = 1.0
                    rs.append((None, du, lim.tau_lb[j] - guess.taus[k][j],
                               lim.tau_ub[j] - guess.taus[k][j], ""))
                for l in range(nee):
                    F = guess.forces[k, l]
                    stance = ctx.gamma[k, l]
                    for c in range(3):
                        du = np.zeros(self.n_u0)
                        du[nj + 3 * l + c] = 1.0
                        if stance:
                            lo = (-cfg.f_max if c < 2 else cfg.f_min) - F[c]
                            hi = cfg.f_max - F[c]
                        else:
                            lo = hi = -F[c]  # swing force pinned to zero
                        rs.append((None, du, lo, hi, ""))
                # friction pyramid at stance nodes
                for l in range(nee):
                    if not ctx.gamma[k, l]:
                        continue
                    F = guess.forces[k, l]
                    for ax, sgn in ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)):
                        du = np.zeros(self.n_u0)
                        du[nj + 3 * l + ax] = sgn
                        du[nj + 3 * l + 2] = -cfg.mu
                        rs.append((None, du, -INF,
                                   -(sgn * F[ax] - cfg.mu * F[2]), ""))
            # collision spheres (avoidance: distance >= radii sum)
            kin = kins[k]
            for p_i, pair in enumerate(self.model.collision_pairs):
                ia = nee + 2 * p_i
                ib = ia + 1
                d = kin.pos[ia] - kin.pos[ib]
                dist = float(np.linalg.norm(d))
                n_hat = d / max(dist, 1e-9)
                grad = n_hat @ (kin.pos_dq[ia] - kin.pos_dq[ib])  # (n_v,)
                cx = np.zeros(self.n_dx)
                cx[:nv] = grad
                margin = dist - (pair.radius_a + pair.radius_b)
                rs.append((cx, None, -margin, INF, ""))
            # foothold polytopes at stance nodes (soft, skipped while the
            # foot is already in contact in its current phase)
            for l in range(nee):
                if not ctx.gamma[k, l]:
                    continue
                rs.extend(self._polytope_rows(ctx, kins, k, l, bag))
        return rows

    def _polytope_rows(self, ctx, kins, k, l, bag):
        cfg = self.config
        kin = kins[k]
        nv = self.n_v
        masked = (ctx.current_contact[l]
                  and ctx.phase_ids[k, l] == ctx.current_phase[l])
        asg = None if bag is None else bag.get((l, int(ctx.phase_ids[k, l])))
        if asg is None or not asg.constrained:
            masked = True
        elif asg.A.shape[0] > cfg.polytope_rows:
            raise ValueError(
                f"tile {asg.tile_id} has {asg.A.shape[0]} edges; raise "
                f"polytope_rows (currently {cfg.polytope_rows})")
        out = []
        Jxy = kin.pos_dq[l][0:2]
        Jz = kin.pos_dq[l][2]
        r = kin.pos[l]
        for i in range(cfg.polytope_rows):
            cx = np.zeros(self.n_dx)
            if masked or i >= asg.A.shape[0]:
                out.append((cx, None, -INF, INF, f"poly{l}"))
                continue
            cx[:nv] = asg.A[i] @ Jxy
            out.append((cx, None, -INF,
                        asg.b[i] - asg.A[i] @ r[0:2], f"poly{l}"))
        for sgn in (1.0, -1.0):
            cx = np.zeros(self.n_dx)
            if masked:
                out.append((cx, None, -INF, INF, f"poly{l}"))
                continue
            cx[:nv] = sgn * Jz
            bound = (asg.z + cfg.eps_z - r[2]) if sgn > 0 else \
                (r[2] - (asg.z - cfg.eps_z))
            out.append((cx, None, -INF, bound, f"poly{l}"))
        return out

    def build_equalities(self, guess, ctx: StageContext, kins) -> list:
        """Swing-height rows (soft, from the third node on) and no-slip
        rows at stance nodes."""
        N = guess.N
        rows = [[] for _ in range(N + 1)]
        nv = self.n_v
        for k in range(N + 1):
            kin = kins[k]
            for l in range(self.n_ee):
                if ctx.gamma[k, l]:
                    vel = kin.vel[l]
                    for c in range(3):
                        cx = np.zeros(self.n_dx)
                        cx[:nv] = kin.vel_dq[l][c]
                        cx[nv:] = kin.vel_dv[l][c]
                        rows[k].append((cx, None, -vel[c], -vel[c], ""))
                else:
                    cx = np.zeros(self.n_dx)
                    z_t = ctx.z_des[k, l]
                    if k < self.config.swing_height_from_node or np.isnan(z_t):
                        rows[k].append((cx, None, -INF, INF, f"swing{l}"))
                    else:
                        cx[:nv] = kin.pos_dq[l][2]
                        resid = z_t - kin.pos[l][2]
                        rows[k].append((cx, None, resid, resid, f"swing{l}"))
        return rows

    # -- assembly -----------------------------------------------------------

    def assemble(self, guess, ctx, refs, kins, idds, bag) -> OcpQp:
        """Compose dynamics, cost and constraint rows into one padded QP."""
        N = guess.N
        ineq = self.build_inequalities(guess, ctx, kins, bag)
        eq = self.build_equalities(guess, ctx, kins)
        all_rows = [ineq[k] + eq[k] for k in range(N + 1)]

        # slack layout per stage: one column per soft one-sided row, two per
        # soft equality row; counted by row kind so masked rows keep their
        # columns and the structure stays fixed
        def n_slacks(tag):
            return 2 if tag.startswith("swing") else 1

        slack_cols = []
        for k in range(N + 1):
            slack_cols.append(sum(n_slacks(tag) for (_, _, _, _, tag)
                                  in all_rows[k] if tag))
        nu = self.n_u0 + max(slack_cols)
        m_max = max(len(all_rows[k]) + slack_cols[k] for k in range(N + 1))

        qp = OcpQp.zeros(N, self.n_dx, nu, m_max)
        Qs, qlin, Rs, rlin = self.build_cost(guess, refs, kins)
        for k in range(N + 1):
            qp.Q[k] = Qs[k]
            qp.q[k] = qlin[k]
            qp.R[k, :self.n_u0, :self.n_u0] = Rs[k]
            qp.r[k, :self.n_u0] = rlin[k]
            if k < N:
                A, B, b = self.dynamics_blocks(guess, k, idds[k])
                qp.A[k] = A
                qp.B[k, :, :self.n_u0] = B
                qp.b[k] = b
            # rows
            s_next = self.n_u0
            row_i = 0
            for (cx, du, lo, hi, tag) in all_rows[k]:
                if cx is not None:
                    qp.C[k, row_i] = cx
                if du is not None:
                    qp.D[k, row_i, :self.n_u0] = du
                if tag:
                    # slack columns are scaled to penalty units (variable =
                    # weight * violation): unit cost gradient, so the huge
                    # L1 weight cannot distort the interior-point Newton
                    # systems; the small quadratic term keeps the column
                    # curvature bounded and is negligible at constraint-
                    # scale violations
                    w = self.config.slack_weight
                    used = n_slacks(tag)
                    qp.D[k, row_i, s_next] = -1.0 / w
                    if used == 2:  # soft equality: c - s+ + s- in [lo, hi]
                        qp.D[k, row_i, s_next + 1] = 1.0 / w
                    for s in range(used):
                        qp.r[k, s_next + s] = 1.0
                        qp.R[k, s_next + s, s_next + s] = 1.0 / w
                    s_next += used
                qp.lo[k, row_i] = lo
                qp.hi[k, row_i] = hi
                row_i += 1
            for s in range(self.n_u0, s_next):  # slack nonnegativity
                qp.D[k, row_i, s] = 1.0
                qp.lo[k, row_i] = 0.0
                row_i += 1
                # slack variables start strictly interior
                qp.u_init[k, s] = 1.0
            qp.m[k] = row_i
        qp.x0 = np.zeros(self.n_dx)
        return qp

    def soft_penalty(self, guess, ctx, bag) -> float:
        """L1 slack cost of the nonlinear soft-constraint violations of a
        trajectory; added to the nonlinear cost when ranking samples."""
        from .dynamics import ee_positions

        cfg = self.config
        total = 0.0
        for k in range(guess.N + 1):
            r = ee_positions(self.model, guess.qs[k])
            for l in range(self.n_ee):
                if ctx.gamma[k, l]:
                    if (ctx.current_contact[l]
                            and ctx.phase_ids[k, l] == ctx.current_phase[l]):
                        continue
                    asg = None if bag is None else \
                        bag.get((l, int(ctx.phase_ids[k, l])))
                    if asg is None or not asg.constrained:
                        continue
                    total += asg.violation(r[l][0:2])
                    total += max(0.0, r[l][2] - (asg.z + cfg.eps_z))
                    total += max(0.0, (asg.z - cfg.eps_z) - r[l][2])
                else:
                    z_t = ctx.z_des[k, l]
                    if k >= cfg.swing_height_from_node and not np.isnan(z_t):
                        total += abs(r[l][2] - z_t)
        return cfg.slack_weight * total
