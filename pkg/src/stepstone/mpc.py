"""Fixed-mode real-time-iteration MPC.

One instance runs a strict prepare/feedback cycle per control tick: the
preparation phase shifts the warm-start trajectory and caches the
linearizations for every node but the first; the feedback phase linearizes
node 0 at the measured state, assembles the QP, runs one iteration-capped
solve, and applies the full step (no line search). Commands at 1 kHz come
from linear interpolation of the active output trajectory, indexed by
time-since-measurement so compute latency skips the stale prefix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .dynamics import RobotModel, ee_positions
from .liegroup import State, quat_exp, quat_to_matrix
from .terrain import FootholdAssignment
from .transcription import (
    ContactSchedule,
    CostReferences,
    StageContext,
    Transcription,
    TrajectoryGuess,
    TranscriptionConfig,
    make_stage_context,
    swing_z_profile,
)


@dataclass
class CostWeights:
    w_x: np.ndarray
    w_u: np.ndarray
    w_r: np.ndarray
    w_xN: np.ndarray
    terminal_weight: float

    @classmethod
    def default(cls, model: RobotModel) -> "CostWeights":
        nj = model.n_joints
        w_x = np.concatenate([
            [40.0, 40.0, 400.0],          # base position
            [150.0, 150.0, 60.0],         # base orientation
            np.full(nj, 2.0),             # joint angles
            [6.0, 6.0, 6.0],              # base linear velocity
            [2.0, 2.0, 2.0],              # base angular velocity
            np.full(nj, 0.02),            # joint rates
        ])
        w_u = np.concatenate([np.full(nj, 5e-4),
                              np.full(3 * model.n_ee, 2e-5)])
        return cls(w_x=w_x, w_u=w_u, w_r=np.array([150.0, 150.0, 250.0]),
                   w_xN=w_x.copy(), terminal_weight=6.0)


@dataclass
class MpcConfig:
    control_period: float = 0.01
    qp_max_iters: int = 10
    qp_tol: float = 1e-6
    kinematic_radius: float = 0.18
    shrink_margin: float = 0.03
    weights: CostWeights = None
    transcription: TranscriptionConfig = field(default_factory=TranscriptionConfig)


@dataclass
class Command:
    """Per-joint PD setpoints and feedforward torque for the motor loop."""

    q_des: np.ndarray
    v_des: np.ndarray
    tau_ff: np.ndarray


@dataclass
class MpcSolution:
    """One feedback-phase output: the updated trajectory plus bookkeeping."""

    guess: TrajectoryGuess
    qp_objective: float
    nl_cost: float
    ranking_cost: float
    status: str
    iterations: int
    t_start: float
    prep_time: float = 0.0
    fb_time: float = 0.0

    @property
    def valid(self) -> bool:
        return self.status != "diverged" and np.isfinite(self.ranking_cost)


def interpolate(solution: MpcSolution, t: float, n_joints: int) -> Command:
    """Linear interpolation of the output trajectory at query time t.

    The trajectory starts at the state-measurement time, so querying at
    the current wall/sim time after a 5 ms solve picks the action 5 ms
    into the trajectory; beyond the horizon the last node holds.
    """
    g = solution.guess
    times = g.node_times
    t = max(t, times[0])
    if t >= times[-1]:
        q = g.qs[-1][7:]
        v = g.vs[-1][6:]
        tau = g.taus[-1]
        return Command(q_des=q.copy(), v_des=v.copy(), tau_ff=tau.copy())
    k = int(np.searchsorted(times, t, side="right") - 1)
    k = min(max(k, 0), g.N - 1)
    s = (t - times[k]) / (times[k + 1] - times[k])
    q = (1 - s) * g.qs[k][7:] + s * g.qs[k + 1][7:]
    v = (1 - s) * g.vs[k][6:] + s * g.vs[k + 1][6:]
    if k + 1 < g.N:
        tau = (1 - s) * g.taus[k] + s * g.taus[k + 1]
    else:
        tau = g.taus[k].copy()
    return Command(q_des=q, v_des=v, tau_ff=tau)


class ReferenceBuilder:
    """Desired states, inputs and foot targets for the tracking cost.

    Base references integrate the commanded planar velocity from the
    current pose; inputs regularize to zero torque and gravity-sharing
    normal forces; foot targets follow the nominal-foothold guidance with
    the swing-height profile, shared by every sample so the ranking
    compares like against like.
    """

    def __init__(self, model: RobotModel, config: MpcConfig,
                 base_height: float):
        self.model = model
        self.config = config
        self.base_height = base_height
        self.nominal_joints = model.nominal_state().q[7:]

    def swing_targets(self, times, schedule: ContactSchedule, bag) -> np.ndarray:
        """(K, n_ee) swing-height targets from the assigned tile heights;
        NaN where no target applies."""
        cfg = self.config.transcription
        K = len(times)
        z = np.full((K, self.model.n_ee), np.nan)
        for l in range(self.model.n_ee):
            for k, t in enumerate(times):
                if schedule.in_stance(l, t):
                    continue
                sw = schedule.swing_interval(l, t)
                if sw is None:
                    continue
                lo, td = sw
                pid = schedule.stance_phase_id(l, td)
                if pid is None:
                    continue
                a_to = bag.get((l, pid))
                a_from = bag.get((l, pid - 1))
                z_to = a_to.z if a_to is not None and a_to.constrained else None
                z_from = a_from.z if a_from is not None and a_from.constrained \
                    else None
                if z_to is None and z_from is None:
                    continue
                z_to = z_to if z_to is not None else z_from
                z_from = z_from if z_from is not None else z_to
                z[k, l] = swing_z_profile(t, lo, td, z_from, z_to,
                                          cfg.swing_clearance)
        return z

    def build(self, guess: TrajectoryGuess, state: State, v_cmd,
              schedule: ContactSchedule, nominals, ref_bag,
              weights: CostWeights) -> CostReferences:
        model = self.model
        N = guess.N
        times = guess.node_times
        t0 = times[0]
        R = quat_to_matrix(state.base_quat)
        yaw0 = float(np.arctan2(R[1, 0], R[0, 0]))
        vx, vy = float(v_cmd[0]), float(v_cmd[1])
        wz = float(v_cmd[2]) if len(v_cmd) > 2 else 0.0

        nom_xy = {(n.ee, n.phase): n.xy for n in nominals}
        feet_now = ee_positions(model, state.q)
        ctx_gamma = schedule.contact_flags(times)
        z_ref = self.swing_targets(times, schedule, ref_bag)

        q_ref = np.zeros((N + 1, model.n_q))
        v_ref = np.zeros((N + 1, model.n_v))
        xy = state.base_pos[0:2].copy()
        yaw = yaw0
        W = model.total_mass() * model.gravity
        tau_ref = np.zeros((N, model.n_joints))
        F_ref = np.zeros((N, model.n_ee, 3))
        r_ref = np.zeros((N, model.n_ee, 3))

        for k in range(N + 1):
            dt = 0.0 if k == 0 else times[k] - times[k - 1]
            if k > 0:
                cz, sz = np.cos(yaw), np.sin(yaw)
                xy = xy + dt * np.array([cz * vx - sz * vy, sz * vx + cz * vy])
                yaw = yaw + dt * wz
            stance = np.where(ctx_gamma[k])[0]
            z_terr = 0.0
            heights = [ref_bag[(l, p)].z for l in stance
                       for p in [schedule.stance_phase_id(l, times[k])]
                       if (l, p) in ref_bag and ref_bag[(l, p)].constrained]
            if heights:
                z_terr = float(np.mean(heights))
            elif k > 0:
                z_terr = q_ref[k - 1, 2] - self.base_height
            q_ref[k, 0:2] = xy
            q_ref[k, 2] = self.base_height + z_terr
            q_ref[k, 3:7] = quat_exp(np.array([0.0, 0.0, yaw]))
            q_ref[k, 7:] = self.nominal_joints
            cz, sz = np.cos(yaw), np.sin(yaw)
            v_ref[k, 0:2] = [cz * vx - sz * vy, sz * vx + cz * vy]
            v_ref[k, 5] = wz
            if k < N:
                n_st = max(len(stance), 1)
                for l in stance:
                    F_ref[k, l, 2] = W / n_st
                for l in range(model.n_ee):
                    r_ref[k, l] = self._foot_target(
                        l, times[k], t0, schedule, nom_xy, ref_bag,
                        feet_now[l], z_ref[k, l])
        return CostReferences(
            q_ref=q_ref, v_ref=v_ref, tau_ref=tau_ref, F_ref=F_ref,
            r_ref=r_ref, w_x=weights.w_x, w_u=weights.w_u, w_r=weights.w_r,
            w_xN=weights.w_xN, terminal_weight=weights.terminal_weight)

    def _foot_target(self, l, t, t_now, schedule, nom_xy, ref_bag, foot_now,
                     z_swing):
        pid = schedule.stance_phase_id(l, t)
        if pid is not None:
            cur = schedule.stance_phase_id(l, t_now)
            if pid == cur:
                return foot_now
            xy = nom_xy.get((l, pid), foot_now[0:2])
            asg = ref_bag.get((l, pid))
            z = asg.z if asg is not None and asg.constrained else foot_now[2]
            return np.array([xy[0], xy[1], z])
        sw = schedule.swing_interval(l, t)
        if sw is None:
            return foot_now
        lo, td = sw
        pid_land = schedule.stance_phase_id(l, td)
        target_xy = nom_xy.get((l, pid_land), foot_now[0:2])
        start_xy = foot_now[0:2] if lo <= t_now else \
            nom_xy.get((l, pid_land - 1), foot_now[0:2])
        s = np.clip((t - lo) / max(td - lo, 1e-9), 0.0, 1.0)
        xy = (1 - s) * np.asarray(start_xy) + s * np.asarray(target_xy)
        if np.isnan(z_swing):
            asg = ref_bag.get((l, pid_land))
            z_swing = asg.z if asg is not None and asg.constrained else foot_now[2]
        return np.array([xy[0], xy[1], z_swing])


class MpcInstance:
    """One fixed-mode RTI controller (strictly sequential prepare/feedback)."""

    def __init__(self, model: RobotModel, config: MpcConfig = None,
                 index: int = 0):
        self.model = model
        self.config = config or MpcConfig()
        if self.config.weights is None:
            self.config.weights = CostWeights.default(model)
        self.trans = Transcription(model, self.config.transcription)
        self.index = index
        self.guess: TrajectoryGuess | None = None
        self.solve_count = 0
        self._ctx = None
        self._refs = None
        self._bag = None
        self._kins = None
        self._idds = None

    # -- preparation phase --------------------------------------------------

    def prepare(self, guess: TrajectoryGuess, ctx: StageContext,
                refs: CostReferences, bag, shared_lin=None):
        """Cache the shifted guess and the linearizations for every node
        but the first; node 0 waits for the measured state."""
        self.guess = guess.copy()
        self._ctx = ctx
        self._refs = refs
        self._bag = bag
        if shared_lin is not None:
            self._kins, self._idds = shared_lin
        else:
            self._kins = [None] * (guess.N + 1)
            self._idds = [None] * guess.N
            for k in range(1, guess.N + 1):
                nl = self.trans.node_lin(guess, k, with_dynamics=(k < guess.N))
                self._kins[k] = nl.kin
                if k < guess.N:
                    self._idds[k] = nl.idd

    def build_feedback_qp(self, x_meas: State) -> qpsolver.OcpQp:
        """Node-0 linearization at the measured state plus assembly."""
        if self.guess is None:
            raise RuntimeError("prepare must run before feedback")
        self.guess.qs[0] = x_meas.q.copy()
        self.guess.vs[0] = x_meas.v.copy()
        nl = self.trans.node_lin(self.guess, 0)
        kins = list(self._kins)
        idds = list(self._idds)
        kins[0] = nl.kin
        idds[0] = nl.idd
        self._kins = kins
        self._idds = idds
        return self.trans.assemble(self.guess, self._ctx, self._refs,
                                   kins, idds, self._bag)

    def accept(self, sol: qpsolver.QpSolution, t_meas: float) -> MpcSolution:
        """Apply the QP step to the trajectory and evaluate the ranking
        cost; a diverged solve keeps the previous trajectory, flagged."""
        self.solve_count += 1
        if sol.status == "diverged":
            updated = self.guess.copy()
        else:
            updated = self.guess.apply_step(sol.dx, sol.du)
        nl_cost = self.trans.nonlinear_cost(updated, self._refs)
        penalty = self.trans.soft_penalty(updated, self._ctx, self._bag)
        ranking = nl_cost + penalty if sol.status != "diverged" else np.inf
        return MpcSolution(
            guess=updated, qp_objective=sol.objective, nl_cost=nl_cost,
            ranking_cost=ranking, status=sol.status,
            iterations=sol.iterations, t_start=t_meas)

    def feedback(self, x_meas: State, t_meas: float) -> MpcSolution:
        """Single-QP feedback phase (exactly one solve per call)."""
        qp = self.build_feedback_qp(x_meas)
        sol = qpsolver.solve(qp, max_iters=self.config.qp_max_iters,
                             tol=self.config.qp_tol)
        return self.accept(sol, t_meas)
