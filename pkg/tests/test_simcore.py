"""Simulator tests against closed-form and scipy oracles."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from retargetkit.frames import Frame
from retargetkit.morphology import BodySpec, CollisionShape, JointSpec, Morphology
from retargetkit.simcore import (
    SimBatch,
    SimConfig,
    apply_deadband,
    batched_cholesky,
    cholesky_solve,
    pd_torques,
    read_state,
    step,
)


def free_body(mass=2.0, inertia=None, collision=(), z0=1.0):
    """Morphology with a single floating body and no joints."""
    if inertia is None:
        inertia = 0.05 * np.eye(3)
    body = BodySpec("base", None, mass, inertia, collision=collision)
    return Morphology(
        bodies=[body], joints=[], root_body="base", contact_bodies=[],
        nominal_q=np.zeros(0),
        nominal_root=Frame(np.array([0.0, 0.0, z0]), np.eye(3),
                           np.zeros(3), np.zeros(3)),
    )


def two_link(kp=60.0, kd=2.0, z0=2.0):
    """Floating base with one revolute child, far above the ground."""
    base = BodySpec("base", None, 3.0, 0.04 * np.eye(3))
    arm = BodySpec("arm", "elbow", 1.0, 0.01 * np.eye(3),
                   com_offset=np.array([0.0, 0.0, -0.3]))
    joint = JointSpec("elbow", "base", "arm", axis=np.array([0.0, 1.0, 0.0]),
                      origin_pos=np.array([0.2, 0.0, 0.0]),
                      limits=(-2.0, 2.0), torque_limit=50.0, kp=kp, kd=kd)
    return Morphology(
        bodies=[base, arm], joints=[joint], root_body="base",
        contact_bodies=[], nominal_q=np.zeros(1),
        nominal_root=Frame(np.array([0.0, 0.0, z0]), np.eye(3),
                           np.zeros(3), np.zeros(3)),
    )


class TestLinearAlgebra:
    def test_cholesky_matches_numpy(self):
        rng = np.random.default_rng(0)
        for n in (1, 3, 7):
            A = rng.standard_normal((8, n, n))
            M = A @ np.swapaxes(A, -1, -2) + n * np.eye(n)
            L = batched_cholesky(M)
            np.testing.assert_allclose(L, np.linalg.cholesky(M), atol=1e-10)
            rhs = rng.standard_normal((8, n))
            x = cholesky_solve(L, rhs)
            np.testing.assert_allclose(
                x, np.linalg.solve(M, rhs[..., None])[..., 0], atol=1e-9
            )


class TestHelpers:
    def test_deadband_values(self):
        w = np.array([-0.3, -0.1, -0.05, 0.0, 0.05, 0.1, 0.3])
        out = apply_deadband(w, 0.1)
        np.testing.assert_allclose(out, [-0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2])

    def test_deadband_continuity(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(-0.5, 0.5, size=1000)
        out1 = apply_deadband(w, 0.1)
        out2 = apply_deadband(w + 1e-9, 0.1)
        assert np.max(np.abs(out1 - out2)) < 2e-9

    def test_pd_clamps_to_limits(self):
        tau = pd_torques(np.zeros(2), np.zeros(2), np.array([10.0, -10.0]),
                         kp=np.full(2, 60.0), kd=np.full(2, 2.0),
                         torque_limits=np.array([5.0, 5.0]))
        np.testing.assert_allclose(tau, [5.0, -5.0])


class TestFreeBody:
    def test_ballistic_flight(self):
        """Projectile matches the closed-form parabola at 0.5 s."""
        cfg = SimConfig(control_dt=0.02, substeps=64)
        morph = free_body(z0=5.0)
        batch = SimBatch(morph, cfg, 1)
        v0 = np.array([1.5, -0.5, 2.0])
        batch.root_linvel[0] = v0
        T = 0.5
        for _ in range(int(round(T / cfg.control_dt))):
            batch.step(np.zeros((1, 0)))
        expected = np.array([0.0, 0.0, 5.0]) + v0 * T \
            + 0.5 * np.array([0.0, 0.0, -cfg.gravity]) * T * T
        assert np.linalg.norm(batch.root_pos[0] - expected) < 1e-3
        assert not batch.fault[0]

    def test_momentum_conservation_isotropic(self):
        """Torque-free isotropic body: both momenta constant to 1e-6 over
        100 control steps."""
        cfg = SimConfig(gravity=0.0)
        morph = free_body(mass=1.5, inertia=0.08 * np.eye(3), z0=2.0)
        batch = SimBatch(morph, cfg, 1)
        batch.root_linvel[0] = [0.4, -0.2, 0.1]
        batch.root_angvel[0] = [2.0, -1.0, 3.0]
        p0 = batch.linear_momentum()[0].copy()
        L0 = batch.angular_momentum()[0].copy()
        for _ in range(100):
            batch.step(np.zeros((1, 0)))
        assert np.linalg.norm(batch.linear_momentum()[0] - p0) < 1e-6
        assert np.linalg.norm(batch.angular_momentum()[0] - L0) < 1e-6

    def test_tumbling_matches_euler_equations(self):
        """Anisotropic torque-free body tracks scipy on Euler's equations."""
        I_body = np.diag([0.02, 0.05, 0.09])
        cfg = SimConfig(control_dt=0.02, substeps=200, gravity=0.0)
        morph = free_body(mass=1.0, inertia=I_body, z0=2.0)
        batch = SimBatch(morph, cfg, 1)
        w0_body = np.array([3.0, 0.5, 1.0])
        batch.root_angvel[0] = w0_body  # root_rot = I, body frame = world
        T = 0.5
        for _ in range(int(round(T / cfg.control_dt))):
            batch.step(np.zeros((1, 0)))

        Id = np.diag(I_body)

        def euler(t, w):
            return -np.cross(w, Id * w) / Id

        sol = solve_ivp(euler, (0.0, T), w0_body, rtol=1e-11, atol=1e-12)
        w_body_sim = batch.root_rot[0].T @ batch.root_angvel[0]
        assert np.linalg.norm(w_body_sim - sol.y[:, -1]) < 1e-3

    def test_divergence_fault_freezes_env(self):
        cfg = SimConfig()
        morph = free_body()
        batch = SimBatch(morph, cfg, 2)
        batch.root_linvel[0] = [1e4, 0.0, 0.0]  # beyond the velocity guard
        batch.step(np.zeros((2, 0)))
        assert batch.fault[0] and not batch.fault[1]
        frozen = batch.root_pos[0].copy()
        batch.step(np.zeros((2, 0)))
        np.testing.assert_array_equal(batch.root_pos[0], frozen)


class TestGroundContact:
    def sphere_body(self, mass=2.0, radius=0.1):
        shape = CollisionShape("sphere", radius, center=np.zeros(3))
        return free_body(mass=mass, inertia=0.01 * np.eye(3),
                         collision=(shape,), z0=radius)

    def test_resting_normal_force_matches_weight(self):
        cfg = SimConfig()
        mass, radius = 2.0, 0.1
        morph = self.sphere_body(mass, radius)
        batch = SimBatch(morph, cfg, 1)
        # Start at the static equilibrium penetration and let it settle.
        batch.root_pos[0, 2] = radius - mass * cfg.gravity / cfg.contact_stiffness
        for _ in range(100):
            batch.step(np.zeros((1, 0)))
        weight = mass * cfg.gravity
        total_fn = batch.contact_normal_force[0].sum()
        assert abs(total_fn - weight) / weight < 0.02
        depth = batch.contact_depth[0].max()
        assert abs(depth - weight / cfg.contact_stiffness) / (
            weight / cfg.contact_stiffness) < 0.05
        assert abs(batch.root_linvel[0, 2]) < 1e-4

    def test_dropped_sphere_settles(self):
        cfg = SimConfig()
        morph = self.sphere_body()
        batch = SimBatch(morph, cfg, 1)
        batch.root_pos[0, 2] = 0.15
        for _ in range(150):  # 3 s
            batch.step(np.zeros((1, 0)))
        weight = 2.0 * cfg.gravity
        assert abs(batch.contact_normal_force[0].sum() - weight) / weight < 0.02
        # Never sinks through the plane beyond the compliant layer.
        assert batch.contact_depth[0].max() < 5e-3

    def test_friction_capped_and_opposes_sliding(self):
        cfg = SimConfig()
        morph = self.sphere_body()
        batch = SimBatch(morph, cfg, 1)
        mass = 2.0
        batch.root_pos[0, 2] = 0.1 - mass * cfg.gravity / cfg.contact_stiffness
        batch.root_linvel[0] = [1.0, 0.0, 0.0]
        v_prev = 1.0
        for _ in range(25):
            batch.step(np.zeros((1, 0)))
            assert batch.root_linvel[0, 0] < v_prev  # decelerating
            v_prev = batch.root_linvel[0, 0]
        # Deceleration never exceeds the Coulomb limit mu * g.
        assert v_prev > 1.0 - cfg.friction * cfg.gravity * 25 * cfg.control_dt - 1e-6

    def test_wrench_deadband_reflected_in_effective_wrench(self):
        cfg = SimConfig()
        morph = self.sphere_body()
        batch = SimBatch(morph, cfg, 1)
        raw = np.array([[0.3, -0.05, 0.0, 0.2, 0.0, -0.15]])
        eff = batch.step(np.zeros((1, 0)), root_wrench=raw)
        np.testing.assert_allclose(eff[0], [0.2, 0.0, 0.0, 0.1, 0.0, -0.05])


class TestArticulated:
    def test_pd_reaches_setpoint_without_gravity(self):
        cfg = SimConfig(gravity=0.0)
        morph = two_link(kp=40.0, kd=8.0)
        batch = SimBatch(morph, cfg, 1)
        target = np.array([[0.7]])
        for _ in range(200):
            batch.step(target)
        assert abs(batch.q[0, 0] - 0.7) < 1e-4
        assert abs(batch.qd[0, 0]) < 1e-4

    def test_joint_limits_enforced(self):
        cfg = SimConfig(gravity=0.0)
        morph = two_link(kp=60.0, kd=0.5)
        batch = SimBatch(morph, cfg, 1)
        for _ in range(100):
            batch.step(np.array([[10.0]]))  # setpoint far past the limit
        assert batch.q[0, 0] <= 2.0 + 1e-12

    def test_passive_chain_momentum_drift_first_order(self):
        """With no external forces the discrete momentum drift of an
        articulated chain shrinks linearly with the substep size."""
        drifts = []
        for substeps in (4, 40):
            cfg = SimConfig(gravity=0.0, substeps=substeps)
            morph = two_link(kp=0.0, kd=0.0)
            batch = SimBatch(morph, cfg, 1)
            batch.qd[0, 0] = 2.0
            batch.root_angvel[0] = [0.5, -0.3, 0.8]
            batch.root_linvel[0] = [0.2, 0.1, 0.0]
            p0 = batch.linear_momentum()[0].copy()
            L0 = batch.angular_momentum()[0].copy()
            for _ in range(100):
                batch.step(np.zeros((1, 1)))
            drifts.append(
                np.linalg.norm(batch.linear_momentum()[0] - p0)
                + np.linalg.norm(batch.angular_momentum()[0] - L0)
            )
        assert drifts[0] < 2e-2
        assert drifts[1] < 0.15 * drifts[0]  # ~10x smaller dt, ~10x less drift

    def test_torque_accounting_exposed(self):
        cfg = SimConfig(gravity=0.0)
        morph = two_link()
        batch = SimBatch(morph, cfg, 1)
        batch.step(np.array([[0.5]]))
        assert batch.last_joint_torques[0, 0] > 0.0
        assert np.isfinite(batch.last_joint_acc[0, 0])


class TestDeterminism:
    def scenario(self, n_envs, seed=3):
        rng = np.random.default_rng(seed)
        cfg = SimConfig()
        shape = CollisionShape("capsule", 0.05,
                               p0=np.array([0.0, 0.0, -0.25]),
                               p1=np.array([0.0, 0.0, 0.25]))
        base = BodySpec("base", None, 3.0, 0.04 * np.eye(3), collision=(shape,))
        arm = BodySpec("arm", "elbow", 1.0, 0.01 * np.eye(3),
                       com_offset=np.array([0.0, 0.0, -0.2]),
                       collision=(CollisionShape("sphere", 0.04,
                                                 center=np.array([0.0, 0.0, -0.4])),))
        joint = JointSpec("elbow", "base", "arm", axis=np.array([0.0, 1.0, 0.0]),
                          origin_pos=np.array([0.1, 0.0, -0.2]))
        morph = Morphology([base, arm], [joint], "base", ["arm"], np.zeros(1),
                           Frame(np.array([0.0, 0.0, 0.6]), np.eye(3),
                                 np.zeros(3), np.zeros(3)))
        batch = SimBatch(morph, cfg, n_envs)
        inits = []
        for e in range(n_envs):
            root = Frame(np.array([0.1 * e, 0.0, 0.6]), np.eye(3),
                         rng.standard_normal(3) * 0.1, rng.standard_normal(3) * 0.1)
            q = rng.uniform(-0.3, 0.3, size=1)
            batch.set_env(e, root, q)
            inits.append((root, q))
        actions = rng.uniform(-0.5, 0.5, size=(20, n_envs, 1))
        wrenches = rng.uniform(-0.3, 0.3, size=(20, n_envs, 6))
        return morph, cfg, batch, inits, actions, wrenches

    def test_repeat_run_bitwise_identical(self):
        results = []
        for _ in range(2):
            _, _, batch, _, actions, wrenches = self.scenario(4)
            for t in range(20):
                batch.step(actions[t], wrenches[t])
            results.append((batch.root_pos.copy(), batch.root_rot.copy(),
                            batch.q.copy(), batch.qd.copy()))
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)

    def test_batch_matches_sequential_bitwise(self):
        morph, cfg, batch, inits, actions, wrenches = self.scenario(3)
        for t in range(20):
            batch.step(actions[t], wrenches[t])
        for e in range(3):
            solo = SimBatch(morph, cfg, 1)
            solo.set_env(0, inits[e][0], inits[e][1])
            for t in range(20):
                solo.step(actions[t, e:e + 1], wrenches[t, e:e + 1])
            np.testing.assert_array_equal(solo.root_pos[0], batch.root_pos[e])
            np.testing.assert_array_equal(solo.root_rot[0], batch.root_rot[e])
            np.testing.assert_array_equal(solo.q[0], batch.q[e])
            np.testing.assert_array_equal(solo.qd[0], batch.qd[e])

    def test_snapshot_restore_exact_resume(self):
        morph, cfg, batch, _, actions, wrenches = self.scenario(2)
        for t in range(5):
            batch.step(actions[t], wrenches[t])
        snap = batch.snapshot()
        for t in range(5, 10):
            batch.step(actions[t], wrenches[t])
        ref = batch.root_pos.copy()
        batch.restore(snap)
        for t in range(5, 10):
            batch.step(actions[t], wrenches[t])
        np.testing.assert_array_equal(batch.root_pos, ref)

    def test_single_env_wrapper_matches_batch(self):
        morph, cfg, batch, inits, actions, wrenches = self.scenario(1)
        state = read_state(batch, 0)
        for t in range(5):
            batch.step(actions[t], wrenches[t])
            state = step(morph, state, actions[t, 0], cfg,
                         root_wrench=wrenches[t, 0])
        np.testing.assert_array_equal(state.root.pos, batch.root_pos[0])
        np.testing.assert_array_equal(state.q, batch.q[0])


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            SimConfig(control_dt=0.0)
        with pytest.raises(ValueError):
            SimConfig(substeps=0)
        with pytest.raises(ValueError):
            SimConfig(slip_velocity=0.0)
        with pytest.raises(ValueError):
            SimConfig(wrench_deadband=-0.1)

    def test_substep_dt(self):
        assert SimConfig(control_dt=0.02, substeps=4).dt == pytest.approx(0.005)
