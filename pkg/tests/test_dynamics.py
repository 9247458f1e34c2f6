import numpy as np
import pytest
from conftest import make_pendulum, make_two_link, two_link_lagrangian

from dynid import dynamics as dyn
from dynid import model_gen as mg
from dynid.errors import ContractError


def random_state(rng, n=6, q_scale=1.5, qd_scale=3.0):
    return rng.uniform(-q_scale, q_scale, n), rng.uniform(-qd_scale, qd_scale, n)


class TestForwardKinematics:
    def test_zero_configuration_matches_rest_poses(self, robot):
        poses = dyn.forward_kinematics(robot, np.zeros(6))
        # default template: pure translations along z, so rest poses stack up
        expected_z = np.cumsum([0] + [l for l in robot.template.link_lengths])
        origins = np.asarray(robot.template.joint_origins)
        expected_z[1:] += np.cumsum(origins[:, 2]) - origins[:, 2].cumsum() * 0  # joints offset along z
        z = np.cumsum(origins[:, 2])
        tips = z + np.asarray(robot.template.link_lengths)
        for i, pose in enumerate(poses[1:]):
            np.testing.assert_allclose(pose.translation, [0, 0, tips[i]], atol=1e-15)
            np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-15)
        assert len(poses) == 7

    def test_base_yaw_preserves_z(self, robot):
        q = np.zeros(6)
        q[0] = np.pi
        poses = dyn.forward_kinematics(robot, q)
        np.testing.assert_allclose(poses[1].translation[2],
                                   dyn.forward_kinematics(robot, np.zeros(6))[1].translation[2],
                                   rtol=1e-15)

    def test_matches_independent_homogeneous_chain(self, robot):
        # oracle: 4x4 homogeneous-transform chain coded from scratch
        rng = np.random.default_rng(5)
        t = robot.template
        for _ in range(20):
            q, _ = random_state(rng)
            T = np.eye(4)
            for i in range(6):
                A = np.eye(4)
                A[:3, 3] = t.joint_origins[i]
                R = np.eye(4)
                R[:3, :3] = dyn.rpy_matrix(t.joint_rpy[i]) @ dyn.axis_rotation(t.joint_axes[i], q[i])
                T = T @ A @ R
            tip = T @ np.array([0, 0, t.link_lengths[5], 1.0])
            pose = dyn.forward_kinematics(robot, q)[6]
            np.testing.assert_allclose(pose.translation, tip[:3], atol=1e-10)

    def test_orthonormal_rotations(self, robot):
        rng = np.random.default_rng(6)
        q, _ = random_state(rng)
        for pose in dyn.forward_kinematics(robot, q):
            np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(pose.rotation) == pytest.approx(1.0, abs=1e-9)


class TestJacobian:
    def test_base_frame_is_zero(self, robot):
        assert not dyn.jacobian(robot, np.zeros(6), 0).any()

    def test_distal_columns_zero(self, robot):
        rng = np.random.default_rng(7)
        q, _ = random_state(rng)
        for frame in range(1, 6):
            J = dyn.jacobian(robot, q, frame)
            assert not J[:, frame:].any()

    def test_linear_rows_match_finite_differences(self, robot):
        rng = np.random.default_rng(8)
        h = 1e-6
        for _ in range(25):
            q, _ = random_state(rng)
            frame = int(rng.integers(1, 7))
            J = dyn.jacobian(robot, q, frame)
            for j in range(6):
                dq = np.zeros(6)
                dq[j] = h
                fp = dyn.forward_kinematics(robot, q + dq)[frame].translation
                fm = dyn.forward_kinematics(robot, q - dq)[frame].translation
                np.testing.assert_allclose(J[:3, j], (fp - fm) / (2 * h), atol=1e-5)

    def test_angular_rows_are_joint_axes(self, robot):
        rng = np.random.default_rng(9)
        q, _ = random_state(rng)
        J = dyn.jacobian(robot, q, 6)
        R, _ = dyn._world_joint_frames(robot, q)
        for j in range(6):
            np.testing.assert_allclose(J[3:, j], R[j + 1] @ robot.template.joint_axes[j], atol=1e-12)

    def test_invalid_frame_rejected(self, robot):
        with pytest.raises(ContractError):
            dyn.jacobian(robot, np.zeros(6), 7)


class TestMassMatrix:
    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(10)
        for trial in range(1000):
            model = mg.generate_robot(seed=trial % 40)
            q, _ = random_state(rng)
            M = dyn.mass_matrix(model, q)
            np.testing.assert_allclose(M, M.T, atol=1e-9)
            np.linalg.cholesky(M)  # raises if not positive definite

    def test_kinetic_energy_matches_per_link_sum(self, robot):
        # oracle: sum of per-link translational + rotational kinetic energies
        rng = np.random.default_rng(11)
        for _ in range(30):
            q, qd = random_state(rng)
            ke_matrix = 0.5 * qd @ dyn.mass_matrix(robot, q) @ qd
            R, p = dyn._world_joint_frames(robot, q)
            axes = np.asarray(robot.template.joint_axes)
            ke = 0.0
            for i in range(6):
                w = np.zeros(3)
                for j in range(i + 1):
                    w += (R[j + 1] @ axes[j]) * qd[j]
                com_local = np.array([0, 0, robot.links[i].length / 2 + robot.links[i].com_offset])
                # COM velocity from the chain of joint point-velocities
                v = np.zeros(3)
                com_world = p[i + 1] + R[i + 1] @ com_local
                for j in range(i + 1):
                    zj = R[j + 1] @ axes[j]
                    v += np.cross(zj * qd[j], com_world - p[j + 1])
                w_local = R[i + 1].T @ w
                inertia = np.diag(robot.links[i].inertia)
                ke += 0.5 * robot.links[i].mass * v @ v + 0.5 * w_local @ inertia @ w_local
            assert ke_matrix == pytest.approx(ke, rel=1e-10, abs=1e-10)


class TestTwoLinkClosedForm:
    def test_mass_bias_gravity_match_lagrangian(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            l1, l2 = rng.uniform(0.2, 0.6, 2)
            m1, m2 = rng.uniform(0.5, 5.0, 2)
            lc1 = rng.uniform(0.05, l1 * 0.95)
            lc2 = rng.uniform(0.05, l2 * 0.95)
            I1, I2 = rng.uniform(0.01, 0.2, 2)
            model = make_two_link(l1, l2, m1, m2, lc1, lc2,
                                  I1=(I1 * 1.1, I1, I1 * 0.8), I2=(I2 * 0.9, I2, I2 * 1.1))
            q = rng.uniform(-3, 3, 2)
            qd = rng.uniform(-4, 4, 2)
            M_cf, bias_cf, G_cf = two_link_lagrangian(q, qd, l1, m1, m2, lc1, lc2, I1, I2)
            np.testing.assert_allclose(dyn.mass_matrix(model, q), M_cf, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(dyn.bias_forces(model, q, qd), bias_cf, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(dyn.gravity_torque(model, q), G_cf, rtol=1e-10, atol=1e-12)


class TestInverseDynamics:
    def test_static_zero_gravity_is_zero(self, robot):
        tau = dyn.inverse_dynamics(robot, np.ones(6) * 0.3, np.zeros(6), np.zeros(6),
                                   gravity=np.zeros(3))
        np.testing.assert_allclose(tau, 0.0, atol=1e-12)

    def test_static_torque_matches_potential_gradient(self, robot):
        # oracle: central finite differences of the potential energy
        rng = np.random.default_rng(13)
        h = 1e-6
        for _ in range(10):
            q, _ = random_state(rng)
            tau = dyn.gravity_torque(robot, q)
            for j in range(6):
                dq = np.zeros(6)
                dq[j] = h
                vp = dyn.total_energy(robot, dyn.JointState(q + dq, np.zeros(6)))
                vm = dyn.total_energy(robot, dyn.JointState(q - dq, np.zeros(6)))
                assert tau[j] == pytest.approx((vp - vm) / (2 * h), abs=1e-6)

    def test_consistent_with_mass_matrix_and_bias(self, robot):
        rng = np.random.default_rng(14)
        for _ in range(50):
            q, qd = random_state(rng)
            qdd = rng.uniform(-5, 5, 6)
            tau = dyn.inverse_dynamics(robot, q, qd, qdd)
            reconstructed = dyn.mass_matrix(robot, q) @ qdd + dyn.bias_forces(robot, q, qd)
            np.testing.assert_allclose(tau, reconstructed, rtol=1e-9, atol=1e-9)


class TestFriction:
    def test_zero_velocity_zero_torque(self):
        assert dyn.friction_torque(mg.JointSpec(0.3, 0.2), 0.0) == 0.0

    def test_formula_value(self):
        val = dyn.friction_torque(mg.JointSpec(0.2, 0.1), 2.0)
        assert val == pytest.approx(0.2 * np.tanh(2.0 / 1e-3) + 0.1 * 2.0, abs=1e-12)
        assert val == pytest.approx(0.4, abs=1e-12)

    def test_odd_symmetry(self):
        joint = mg.JointSpec(0.4, 0.25)
        for v in (1e-4, 0.02, 1.7):
            assert dyn.friction_torque(joint, -v) == pytest.approx(-dyn.friction_torque(joint, v), abs=1e-15)

    def test_saturates_to_ideal_sign_model(self):
        joint = mg.JointSpec(0.5, 0.0)
        for v in (0.01, 0.05, 1.0):
            assert abs(dyn.friction_torque(joint, v) - 0.5) < 1e-6 * 0.5


class TestForwardDynamics:
    def test_inverse_pair(self):
        rng = np.random.default_rng(15)
        for trial in range(200):
            model = mg.generate_robot(seed=1000 + trial)
            q, qd = random_state(rng)
            qdd_star = rng.uniform(-5, 5, 6)
            tau = dyn.inverse_dynamics(model, q, qd, qdd_star) + dyn.friction_vector(model, qd)
            qdd = dyn.forward_dynamics(model, dyn.JointState(q, qd), tau)
            np.testing.assert_allclose(qdd, qdd_star, rtol=1e-8, atol=1e-8)

    def test_zero_gravity_rest_equilibrium(self, robot):
        state = dyn.JointState(np.full(6, 0.4), np.zeros(6))
        qdd = dyn.forward_dynamics(robot, state, np.zeros(6), gravity=np.zeros(3))
        np.testing.assert_allclose(qdd, 0.0, atol=1e-12)

    def test_pendulum_closed_form(self):
        rng = np.random.default_rng(16)
        m, lc, length, iy = 2.0, 0.3, 0.5, 0.05
        for mu_c, mu_v in [(0.0, 0.0), (0.2, 0.1)]:
            pend = make_pendulum(length, m, lc, iy, mu_c, mu_v)
            for _ in range(20):
                q0 = rng.uniform(-2, 2)
                qd0 = rng.uniform(-4, 4)
                friction = mu_c * np.tanh(qd0 / 1e-3) + mu_v * qd0
                qdd_cf = -(m * 9.81 * lc * np.cos(q0) + friction) / (iy + m * lc ** 2)
                qdd = dyn.forward_dynamics(pend, dyn.JointState(np.array([q0]), np.array([qd0])),
                                           np.zeros(1))
                assert qdd[0] == pytest.approx(qdd_cf, rel=1e-10, abs=1e-10)


class TestStep:
    def test_gravity_compensated_fixed_point(self, robot):
        q = np.full(6, 0.3)
        state = dyn.JointState(q.copy(), np.zeros(6))
        tau = dyn.gravity_torque(robot, q)
        out = dyn.step(robot, state, tau, 1e-3)
        np.testing.assert_allclose(out.q, q, atol=1e-12)
        np.testing.assert_allclose(out.qd, 0.0, atol=1e-12)

    def test_rejects_nonpositive_dt(self, robot):
        with pytest.raises(ContractError):
            dyn.step(robot, dyn.JointState(np.zeros(6), np.zeros(6)), np.zeros(6), 0.0)

    def test_joint_limit_clamp_zeroes_velocity(self):
        pend = make_pendulum(limits=(-0.1, 0.1))
        state = dyn.JointState(np.array([0.0999]), np.array([2.0]))
        out = dyn.step(pend, state, np.zeros(1), 1e-3)
        assert out.q[0] == pytest.approx(0.1)
        assert out.qd[0] == 0.0

    def test_frictionless_energy_drift_small(self):
        ranges = mg.VariationRanges(mu_c=(0.0, 0.0), mu_v=(0.0, 0.0))
        template = _wide_limit_template()
        model = mg.generate_robot(seed=11, template=template, ranges=ranges)
        state = dyn.JointState(np.array([0.3, 0.5, -0.4, 0.2, 0.6, -0.1]),
                               np.array([0.5, -0.3, 0.4, 0.2, -0.5, 0.3]))
        e0 = dyn.total_energy(model, state)
        for _ in range(2000):
            state = dyn.step(model, state, np.zeros(6), 1e-4)
        e1 = dyn.total_energy(model, state)
        assert abs(e1 - e0) < 0.01 * abs(e0)

    def test_friction_never_increases_energy(self):
        ranges = mg.VariationRanges(mu_c=(0.02, 0.05), mu_v=(0.3, 0.5))
        template = _wide_limit_template()
        model = mg.generate_robot(seed=11, template=template, ranges=ranges)
        state = dyn.JointState(np.array([0.3, 0.5, -0.4, 0.2, 0.6, -0.1]),
                               np.array([0.5, -0.3, 0.4, 0.2, -0.5, 0.3]))
        prev = dyn.total_energy(model, state)
        for _ in range(2000):
            state = dyn.step(model, state, np.zeros(6), 1e-4)
            energy = dyn.total_energy(model, state)
            assert energy <= prev + 1e-9
            prev = energy


def _wide_limit_template():
    t = mg.DEFAULT_TEMPLATE
    return mg.KinematicTemplate(joint_axes=t.joint_axes, joint_origins=t.joint_origins,
                                joint_rpy=t.joint_rpy, joint_limits=((-12.0, 12.0),) * 6,
                                link_lengths=t.link_lengths)


class TestEnergyAccounting:
    def test_energy_value_matches_manual_sum(self, robot):
        rng = np.random.default_rng(17)
        q, qd = random_state(rng)
        state = dyn.JointState(q, qd)
        total = dyn.total_energy(robot, state)
        kinetic = 0.5 * qd @ dyn.mass_matrix(robot, q) @ qd
        R, p = dyn._world_joint_frames(robot, q)
        potential = 0.0
        for i, link in enumerate(robot.links):
            com = p[i + 1] + R[i + 1] @ [0, 0, link.length / 2 + link.com_offset]
            potential += link.mass * 9.81 * com[2]
        assert total == pytest.approx(kinetic + potential, rel=1e-12)
