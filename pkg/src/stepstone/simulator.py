"""Soft-contact rigid-body simulator with a simulated-clock control stack.

Physics is semi-implicit Euler on the full-order model with a spring-
damper normal force and regularized Coulomb friction per foot against the
tile under it (no force over gaps). A 1 kHz PD+feedforward motor loop
tracks the interpolated MPC output; controller ticks run every control
period on the simulated clock and their solutions become active after a
modeled latency, which reproduces the asynchronous stack deterministically
(a measured-latency mode uses real compute times instead, for timing
studies).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotModel, ee_states, forward_dynamics
from .liegroup import State, config_oplus, quat_to_matrix
from .mpc import Command, MpcSolution, interpolate
from .terrain import Terrain


@dataclass
class SimConfig:
    timestep: float = 0.0005
    contact_stiffness: float = 3.0e4    # N/m
    contact_damping: float = 300.0      # N s/m
    tangential_regularization: float = 0.01  # m/s
    friction: float = 0.7
    kp: float = 60.0
    kd: float = 1.5
    motor_period: float = 0.001
    control_period: float = 0.01
    latency: float = 0.005              # s; fixed-latency deterministic mode
    measured_latency: bool = False
    capture_depth: float = 0.06         # max penetration that still pushes back
    fall_height: float = 0.12
    fall_angle: float = math.radians(60.0)


@dataclass
class SimLog:
    """Closed-loop time series, one row per controller tick."""

    t: list = field(default_factory=list)
    q: list = field(default_factory=list)
    v: list = field(default_factory=list)
    feet: list = field(default_factory=list)        # (n_ee, 4): x, y, z, fz
    chosen: list = field(default_factory=list)
    cost_chosen: list = field(default_factory=list)
    cost_all: list = field(default_factory=list)
    status: list = field(default_factory=list)
    prep_ms: list = field(default_factory=list)
    fb_ms: list = field(default_factory=list)
    fall_time: float | None = None
    divergence_time: float | None = None

    @property
    def failed(self) -> bool:
        return self.fall_time is not None or self.divergence_time is not None

    def final_base_x(self) -> float:
        return self.q[-1][0] if self.q else float("nan")

    def to_csv(self, path, n_samples: int):
        n_ee = len(self.feet[0]) if self.feet else 0
        cols = ["t"]
        cols += [f"q{i}" for i in range(len(self.q[0]))]
        cols += [f"v{i}" for i in range(len(self.v[0]))]
        for l in range(n_ee):
            cols += [f"foot{l}_x", f"foot{l}_y", f"foot{l}_z", f"foot{l}_fz"]
        cols += ["chosen_sample", "cost_chosen"]
        cols += [f"cost_{i}" for i in range(n_samples)]
        cols += ["solver_status", "prep_ms", "fb_ms"]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for i in range(len(self.t)):
                row = [repr(self.t[i])]
                row += [repr(x) for x in self.q[i]]
                row += [repr(x) for x in self.v[i]]
                for l in range(n_ee):
                    row += [repr(x) for x in self.feet[i][l]]
                row += [str(self.chosen[i]), repr(self.cost_chosen[i])]
                costs = list(self.cost_all[i]) + [math.nan] * n_samples
                row += [repr(float(c)) for c in costs[:n_samples]]
                row += [self.status[i], repr(self.prep_ms[i]),
                        repr(self.fb_ms[i])]
                f.write(",".join(row) + "\n")


def contact_forces(model: RobotModel, terrain: Terrain, q, v,
                   config: SimConfig):
    """Per-foot world ground-reaction forces from the soft contact model."""
    pos, vel = ee_states(model, q, v)
    F = np.zeros((model.n_ee, 3))
    for l in range(model.n_ee):
        p, pv = pos[l], vel[l]
        tile = terrain.support_at(p[0:2], p[2], capture=config.capture_depth)
        if tile is None:
            continue
        pen = p[2] - tile.z
        if pen >= 0.0:
            continue
        fz = -config.contact_stiffness * pen - config.contact_damping * pv[2]
        fz = max(fz, 0.0)
        vt = pv[0:2]
        vt_norm = float(np.linalg.norm(vt))
        scale = config.friction * fz / max(vt_norm, config.tangential_regularization)
        F[l, 0:2] = -scale * vt
        F[l, 2] = fz
    return F, pos[: model.n_ee]


def step(model: RobotModel, terrain: Terrain, state: State,
         joint_torques: np.ndarray, config: SimConfig):
    """One semi-implicit Euler physics step; returns (state, forces)."""
    F, _ = contact_forces(model, terrain, state.q, state.v, config)
    a = forward_dynamics(model, state.q, state.v, joint_torques, F)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite acceleration in physics step")
    v_next = state.v + config.timestep * a
    q_next = config_oplus(state.q, config.timestep * v_next)
    return State(q_next, v_next), F


def motor_loop(command: Command, state: State, model: RobotModel,
               config: SimConfig) -> np.ndarray:
    """PD + feedforward torque, clamped to the model limits."""
    q_j = state.q[7:]
    v_j = state.v[6:]
    tau = (command.tau_ff + config.kp * (command.q_des - q_j)
           + config.kd * (command.v_des - v_j))
    return np.clip(tau, model.limits.tau_lb, model.limits.tau_ub)


def base_tilt(state: State):
    R = quat_to_matrix(state.base_quat)
    roll = math.atan2(R[2, 1], R[2, 2])
    pitch = math.atan2(-R[2, 0], math.hypot(R[2, 1], R[2, 2]))
    return roll, pitch


def run_closed_loop(model: RobotModel, terrain: Terrain, controller,
                    command_fn, duration: float, config: SimConfig = None,
                    initial_state: State = None, log_n_samples: int = None):
    """Simulate the full stack on a simulated clock.

    controller must provide tick(state, t, v_cmd) -> LayeredTickResult.
    command_fn(t) -> (vx, vy, yaw_rate). New solutions become active at
    tick time + latency (fixed mode) or + the measured feedback time.
    """
    config = config or SimConfig()
    if not config.measured_latency and config.latency >= config.control_period:
        raise ValueError("latency must stay below the control period")
    state = initial_state if initial_state is not None else model.nominal_state()
    log = SimLog()
    n_samples = log_n_samples or getattr(controller, "M", 1)

    steps_per_motor = max(1, round(config.motor_period / config.timestep))
    motor_per_tick = max(1, round(config.control_period / config.motor_period))
    n_ticks = int(round(duration / config.control_period))

    active: MpcSolution | None = None   # solution driving the motor loop
    pending: MpcSolution | None = None
    pending_at = math.inf
    torques = np.zeros(model.n_joints)
    F = np.zeros((model.n_ee, 3))
    t = 0.0

    for tick_i in range(n_ticks):
        v_cmd = np.asarray(command_fn(t), dtype=float)
        if config.measured_latency:
            w0 = time.perf_counter()
            result = controller.tick(state.copy(), t, v_cmd)
            latency = time.perf_counter() - w0
            latency = min(latency, 0.95 * config.control_period)
        else:
            result = controller.tick(state.copy(), t, v_cmd)
            latency = config.latency
        pending = result.winner
        pending_at = t + latency

        pos, _ = ee_states(model, state.q, state.v)
        feet_rows = np.column_stack([pos[: model.n_ee], F[:, 2]])
        log.t.append(t)
        log.q.append(state.q.copy())
        log.v.append(state.v.copy())
        log.feet.append(feet_rows)
        log.chosen.append(result.chosen)
        log.cost_chosen.append(result.winner.ranking_cost)
        log.cost_all.append([s.ranking_cost for s in result.solutions])
        log.status.append(result.winner.status)
        if config.measured_latency:
            log.prep_ms.append(result.prep_time * 1e3)
            log.fb_ms.append(result.fb_time * 1e3)
        else:
            log.prep_ms.append(math.nan)
            log.fb_ms.append(math.nan)

        for motor_i in range(motor_per_tick):
            if t >= pending_at and pending is not None:
                active = pending
                pending = None
            if active is not None:
                cmd = interpolate(active, t, model.n_joints)
                torques = motor_loop(cmd, state, model, config)
            try:
                for _ in range(steps_per_motor):
                    state, F = step(model, terrain, state, torques, config)
            except FloatingPointError:
                log.divergence_time = t
                return log
            t = round((tick_i * motor_per_tick + motor_i + 1)
                      * config.motor_period, 9)
            roll, pitch = base_tilt(state)
            if (state.base_pos[2] < config.fall_height
                    or abs(roll) > config.fall_angle
                    or abs(pitch) > config.fall_angle):
                log.fall_time = t
                return log
    return log
