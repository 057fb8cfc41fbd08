import numpy as np
import pytest

from stepstone.dynamics import (
    RobotModel,
    ee_positions,
    ee_velocity,
    forward_dynamics,
    forward_kinematics,
    id_derivatives,
    inverse_dynamics,
    kin_derivatives,
    mass_matrix,
    nonlinear_bias,
)
from stepstone.liegroup import State, config_oplus, quat_exp, quat_mul, quat_rotate

from conftest import pendulum_dict, random_state

G = 9.81


def _zero_forces(model):
    return np.zeros((model.n_ee, 3))


class TestInverseDynamicsStatics:
    def test_no_gravity_no_motion_is_zero(self):
        from pathlib import Path

        import stepstone

        path = Path(stepstone.__file__).parent / "data" / "quadruped.json"
        model = RobotModel.from_json(path, gravity=0.0)
        x = model.nominal_state()
        tau = inverse_dynamics(model, x.q, x.v, np.zeros(model.n_v),
                               _zero_forces(model))
        np.testing.assert_allclose(tau, 0, atol=1e-12)

    def test_pendulum_closed_form(self, pendulum):
        m, l = 1.2, 0.5
        x = pendulum.nominal_state()  # horizontal arm along +x
        tau = inverse_dynamics(pendulum, x.q, x.v, np.zeros(pendulum.n_v),
                               _zero_forces(pendulum))
        assert abs(tau[6] - m * G * l) <= 1e-6

    def test_quadruped_standing_equilibrium(self, quadruped):
        model = quadruped
        x = model.nominal_state()
        W = model.total_mass() * G
        forces = np.tile([0.0, 0.0, W / 4], (4, 1))
        tau = inverse_dynamics(model, x.q, x.v, np.zeros(model.n_v), forces)
        # residual base wrench must vanish at equilibrium
        np.testing.assert_allclose(tau[:6], 0, atol=1e-6)
        # independent per-leg static force/moment balance (virtual work about
        # each joint axis, distal masses + ground reaction)
        oracle = _static_leg_torques(model, x.q, forces)
        np.testing.assert_allclose(tau[6:], oracle, atol=1e-6)

    def test_gravity_scaling(self):
        d = pendulum_dict()
        m1 = RobotModel.from_dict(d, gravity=G)
        m2 = RobotModel.from_dict(d, gravity=2 * G)
        x = m1.nominal_state()
        t1 = inverse_dynamics(m1, x.q, x.v, np.zeros(m1.n_v), _zero_forces(m1))
        t2 = inverse_dynamics(m2, x.q, x.v, np.zeros(m2.n_v), _zero_forces(m2))
        np.testing.assert_allclose(t2, 2 * t1, atol=1e-12)

    def test_linearity_in_acceleration_and_force(self, quadruped):
        rng = np.random.default_rng(0)
        model = quadruped
        x = random_state(model, rng)
        a1, a2 = rng.standard_normal(model.n_v), rng.standard_normal(model.n_v)
        F = rng.standard_normal((4, 3)) * 30

        def f(a, forces):
            return inverse_dynamics(model, x.q, x.v, a, forces)

        lhs = f(a1 + a2, F) - f(a1, F) - f(a2, F) + f(np.zeros(model.n_v), F)
        np.testing.assert_allclose(lhs, 0, atol=1e-8)
        F1, F2 = F, rng.standard_normal((4, 3)) * 30
        z = np.zeros(model.n_v)
        lhs = f(z, F1 + F2) - f(z, F1) - f(z, F2) + f(z, np.zeros((4, 3)))
        np.testing.assert_allclose(lhs, 0, atol=1e-8)

    def test_dimension_mismatch_raises(self, quadruped):
        x = quadruped.nominal_state()
        with pytest.raises(ValueError):
            inverse_dynamics(quadruped, x.q, x.v, np.zeros(3), _zero_forces(quadruped))


def _static_leg_torques(model, q, forces):
    """Moment balance about each joint axis: distal link gravity loads plus
    the ground reaction, computed with a test-local FK chain."""
    base_pos, joint_q = q[0:3], q[7:]
    out = np.zeros(model.n_joints)
    feet = _test_fk_points(model, q)
    for li, leg in enumerate(["FL", "FR", "RL", "RR"]):
        frames = _leg_frames(model, q, leg)
        F = forces[li]
        foot = feet[li]
        for jj in range(3):
            p_j, s_j = frames[jj]
            mom = np.zeros(3)
            for (c_b, m_b) in _distal_coms(model, q, leg, jj):
                mom += np.cross(c_b - p_j, np.array([0, 0, m_b * G]))
            mom -= np.cross(foot - p_j, F)
            out[3 * li + jj] = s_j @ mom
    return out


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _leg_geometry(leg):
    sx = 1 if leg[0] == "F" else -1
    sy = 1 if leg[1] == "L" else -1
    return sx, sy


def _leg_frames(model, q, leg):
    """(origin, world axis) per joint of one leg, identity base assumed."""
    sx, sy = _leg_geometry(leg)
    names = [f"{leg}_haa", f"{leg}_hfe", f"{leg}_kfe"]
    th = [q[7 + model.joint_names.index(n)] for n in names]
    base = q[0:3]
    p_haa = base + np.array([sx * 0.19, sy * 0.055, 0.0])
    R1 = _rot_x(th[0])
    p_hfe = p_haa + R1 @ np.array([0.0, sy * 0.08, 0.0])
    R2 = R1 @ _rot_y(th[1])
    p_kfe = p_hfe + R2 @ np.array([0.0, 0.0, -0.21])
    return [(p_haa, np.array([1.0, 0, 0])),
            (p_hfe, R1 @ np.array([0.0, 1, 0])),
            (p_kfe, R2 @ np.array([0.0, 1, 0]))]


def _test_fk_points(model, q):
    pts = []
    for leg in ["FL", "FR", "RL", "RR"]:
        frames = _leg_frames(model, q, leg)
        names = [f"{leg}_haa", f"{leg}_hfe", f"{leg}_kfe"]
        th = [q[7 + model.joint_names.index(n)] for n in names]
        R3 = _rot_x(th[0]) @ _rot_y(th[1]) @ _rot_y(th[2])
        pts.append(frames[2][0] + R3 @ np.array([0.0, 0.0, -0.21]))
    return pts


def _distal_coms(model, q, leg, joint_idx):
    """(world com, mass) of links at or below joint_idx in one leg."""
    sx, sy = _leg_geometry(leg)
    names = [f"{leg}_haa", f"{leg}_hfe", f"{leg}_kfe"]
    th = [q[7 + model.joint_names.index(n)] for n in names]
    frames = _leg_frames(model, q, leg)
    R1 = _rot_x(th[0])
    R2 = R1 @ _rot_y(th[1])
    R3 = R2 @ _rot_y(th[2])
    coms = [
        (frames[0][0] + R1 @ np.array([0.0, sy * 0.04, 0.0]), 0.7),
        (frames[1][0] + R2 @ np.array([0.0, 0.0, -0.105]), 1.0),
        (frames[2][0] + R3 @ np.array([0.0, 0.0, -0.105]), 0.3),
    ]
    return coms[joint_idx:]


class TestForwardKinematics:
    def test_nominal_zero_joint_positions(self, quadruped):
        x = quadruped.nominal_state()
        q = x.q.copy()
        q[2] = 0.0
        q[7:] = 0.0
        expected = {
            0: [0.19, 0.135, -0.42], 1: [0.19, -0.135, -0.42],
            2: [-0.19, 0.135, -0.42], 3: [-0.19, -0.135, -0.42],
        }
        for i, e in expected.items():
            np.testing.assert_allclose(forward_kinematics(quadruped, q, i), e,
                                       atol=1e-12)

    def test_translation_equivariance(self, quadruped):
        rng = np.random.default_rng(1)
        x = random_state(quadruped, rng)
        q2 = x.q.copy()
        q2[0:3] += [1.0, 2.0, 0.0]
        for i in range(4):
            np.testing.assert_allclose(
                forward_kinematics(quadruped, q2, i),
                forward_kinematics(quadruped, x.q, i) + [1.0, 2.0, 0.0], atol=1e-12)

    def test_rotation_equivariance(self, quadruped):
        rng = np.random.default_rng(2)
        x = random_state(quadruped, rng)
        q = x.q.copy()
        q[0:3] = 0.0
        qz = quat_exp(np.array([0, 0, np.pi / 2]))
        q2 = q.copy()
        q2[3:7] = quat_mul(qz, q[3:7])
        for i in range(4):
            np.testing.assert_allclose(
                forward_kinematics(quadruped, q2, i),
                quat_rotate(qz, forward_kinematics(quadruped, q, i)), atol=1e-12)

    def test_bad_index_raises(self, quadruped):
        x = quadruped.nominal_state()
        with pytest.raises(IndexError):
            forward_kinematics(quadruped, x.q, 7)


class TestEndEffectorVelocity:
    def test_zero_velocity(self, quadruped):
        x = quadruped.nominal_state()
        np.testing.assert_allclose(ee_velocity(quadruped, x.q, x.v, 0), 0,
                                   atol=1e-14)

    def test_rigid_translation(self, quadruped):
        x = quadruped.nominal_state()
        v = np.zeros(quadruped.n_v)
        v[0] = 1.0
        for i in range(4):
            np.testing.assert_allclose(ee_velocity(quadruped, x.q, v, i),
                                       [1, 0, 0], atol=1e-14)

    def test_matches_time_derivative_of_fk(self, quadruped):
        rng = np.random.default_rng(3)
        h = 1e-6
        for _ in range(5):
            x = random_state(quadruped, rng)
            for i in range(4):
                qp = config_oplus(x.q, h * x.v)
                qm = config_oplus(x.q, -h * x.v)
                fd = (forward_kinematics(quadruped, qp, i)
                      - forward_kinematics(quadruped, qm, i)) / (2 * h)
                v_ee = ee_velocity(quadruped, x.q, x.v, i)
                err = np.linalg.norm(fd - v_ee) / max(1.0, np.linalg.norm(v_ee))
                assert err <= 1e-5


class TestDerivatives:
    def test_dvnext_is_scaled_mass_matrix(self, quadruped):
        rng = np.random.default_rng(4)
        x = random_state(quadruped, rng)
        dt = 0.02
        v_next = x.v + dt * rng.standard_normal(quadruped.n_v)
        F = 20 * rng.standard_normal((4, 3))
        d = id_derivatives(quadruped, x.q, x.v, v_next, dt, F)
        M = mass_matrix(quadruped, x.q)
        np.testing.assert_allclose(d.d_dvn * dt, M, rtol=1e-4, atol=1e-6)
        evals = np.linalg.eigvalsh(d.d_dvn * dt)
        assert np.all(evals > 0)

    def test_force_jacobian_is_contact_jacobian_transpose(self, quadruped):
        rng = np.random.default_rng(5)
        x = random_state(quadruped, rng)
        dt = 0.02
        d = id_derivatives(quadruped, x.q, x.v, x.v, dt, np.zeros((4, 3)))
        k = kin_derivatives(quadruped, x.q, x.v)
        for e in range(4):
            J = k.pos_dq[e]  # (3, n_v)
            np.testing.assert_allclose(d.d_dF[:, 3 * e: 3 * e + 3], -J.T,
                                       rtol=1e-5, atol=1e-7)

    def test_richardson_two_step_agreement(self, quadruped):
        rng = np.random.default_rng(6)
        x = random_state(quadruped, rng)
        dt = 0.02
        v_next = x.v + 0.1 * rng.standard_normal(quadruped.n_v)
        F = 20 * rng.standard_normal((4, 3))
        fine = id_derivatives(quadruped, x.q, x.v, v_next, dt, F, h=1e-6)
        coarse = id_derivatives(quadruped, x.q, x.v, v_next, dt, F, h=1e-4)
        for name in ("d_dq", "d_dv", "d_dvn", "d_dF"):
            a, b = getattr(fine, name), getattr(coarse, name)
            rel = np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)))
            assert rel <= 1e-3, f"{name} disagrees: {rel}"


class TestForwardDynamics:
    def test_consistent_with_inverse_dynamics(self, quadruped):
        rng = np.random.default_rng(7)
        x = random_state(quadruped, rng)
        tau = 10 * rng.standard_normal(12)
        F = np.tile([0.0, 0.0, 30.0], (4, 1))
        a = forward_dynamics(quadruped, x.q, x.v, tau, F)
        back = inverse_dynamics(quadruped, x.q, x.v, a, F)
        np.testing.assert_allclose(back[:6], 0, atol=1e-8)
        np.testing.assert_allclose(back[6:], tau, atol=1e-8)

    def test_free_fall(self, quadruped):
        x = quadruped.nominal_state()
        a = forward_dynamics(quadruped, x.q, x.v, np.zeros(12), np.zeros((4, 3)))
        np.testing.assert_allclose(a[0:3], [0, 0, -G], atol=1e-9)
        np.testing.assert_allclose(a[3:], 0, atol=1e-9)


def test_mass_matrix_spd(quadruped):
    rng = np.random.default_rng(8)
    x = random_state(quadruped, rng)
    M = mass_matrix(quadruped, x.q)
    np.testing.assert_allclose(M, M.T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(M) > 0)


def test_nonlinear_bias_matches_id(quadruped):
    rng = np.random.default_rng(9)
    x = random_state(quadruped, rng)
    h = nonlinear_bias(quadruped, x.q, x.v)
    f = inverse_dynamics(quadruped, x.q, x.v, np.zeros(quadruped.n_v),
                         np.zeros((4, 3)))
    np.testing.assert_allclose(h, f, atol=1e-14)
