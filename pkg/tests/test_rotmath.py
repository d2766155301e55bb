import numpy as np
import pytest

from retargetkit import rotmath as rm


def random_rotvec(rng, max_angle=np.pi - 1e-6):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


class TestExpMap:
    def test_zero_is_identity(self):
        assert np.allclose(rm.exp_map(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_x(self):
        # Hand-evaluated Rodrigues formula for a pi/2 rotation about x
        R = rm.exp_map(np.array([np.pi / 2, 0.0, 0.0]))
        expected = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        assert np.allclose(R, expected, atol=1e-12)

    def test_output_is_valid_rotation(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            R = rm.exp_map(rng.normal(size=3) * 2.0)
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            rm.exp_map(np.array([np.nan, 0.0, 0.0]))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        vs = rng.normal(size=(7, 3))
        Rs = rm.exp_map(vs)
        for i in range(7):
            assert np.array_equal(Rs[i], rm.exp_map(vs[i]))


class TestLogMap:
    def test_identity_is_zero(self):
        assert np.allclose(rm.log_map(np.eye(3)), np.zeros(3))

    def test_round_trip(self):
        v = np.array([0.0, 1.2, 0.0])
        assert np.allclose(rm.log_map(rm.exp_map(v)), v, atol=1e-9)

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            v = random_rotvec(rng)
            assert np.linalg.norm(rm.log_map(rm.exp_map(v)) - v) < 1e-9

    def test_canonical_norm(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            v = rng.normal(size=3) * 5.0
            out = rm.log_map(rm.exp_map(v))
            assert np.linalg.norm(out) <= np.pi + 1e-12

    def test_pi_branch(self):
        # Half turn about z: log has norm pi along +/-z and exp reproduces R
        R = rm.exp_map(np.array([0.0, 0.0, np.pi]))
        v = rm.log_map(R)
        assert abs(np.linalg.norm(v) - np.pi) < 1e-9
        assert abs(abs(v[2]) - np.pi) < 1e-9
        assert np.abs(rm.exp_map(v) - R).max() < 1e-8

    def test_near_pi_random_axes(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            v = random_rotvec(rng)
            v = v / np.linalg.norm(v) * (np.pi - 1e-7)
            out = rm.log_map(rm.exp_map(v))
            assert np.linalg.norm(out - v) < 1e-6

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            rm.log_map(np.eye(3) * 1.01)


class TestGeodesicError:
    def test_equal_rotations(self):
        R = rm.exp_map(np.array([0.3, -0.2, 0.5]))
        assert np.allclose(rm.geodesic_error(R, R), np.zeros(3), atol=1e-12)

    def test_definition_unrolled(self):
        R_b = rm.exp_map(np.array([0.0, 0.0, 0.3]))
        assert np.allclose(rm.geodesic_error(np.eye(3), R_b), [0.0, 0.0, 0.3], atol=1e-12)

    def test_magnitude_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            A = rm.exp_map(random_rotvec(rng))
            B = rm.exp_map(random_rotvec(rng))
            nab = np.linalg.norm(rm.geodesic_error(A, B))
            nba = np.linalg.norm(rm.geodesic_error(B, A))
            assert abs(nab - nba) < 1e-9

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(6)
        A = rm.exp_map(random_rotvec(rng))
        B = rm.exp_map(random_rotvec(rng))
        assert np.linalg.norm(rm.geodesic_error(A, B)) > 1e-6

    def test_left_invariance(self):
        rng = np.random.default_rng(7)
        A = rm.exp_map(random_rotvec(rng))
        B = rm.exp_map(random_rotvec(rng))
        Q = rm.exp_map(random_rotvec(rng))
        e1 = rm.geodesic_error(A, B)
        e2 = rm.geodesic_error(Q @ A, Q @ B)
        assert np.allclose(e1, e2, atol=1e-9)


class TestSwingTwist:
    def test_pure_twist(self):
        axis = np.array([0.0, 0.0, 1.0])
        R = rm.exp_map(0.4 * axis)
        st = rm.swing_twist(R, axis)
        assert np.allclose(st.swing, np.eye(3), atol=1e-12)
        assert np.allclose(st.twist, R, atol=1e-12)
        assert not st.degenerate

    def test_pure_swing(self):
        R = rm.exp_map(np.array([0.4, 0.0, 0.0]))
        st = rm.swing_twist(R, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(st.twist, np.eye(3), atol=1e-12)
        assert np.allclose(st.swing, R, atol=1e-12)

    def test_reconstruction(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            R = rm.exp_map(random_rotvec(rng))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            st = rm.swing_twist(R, axis)
            assert np.abs(st.swing @ st.twist - R).max() < 1e-9

    def test_twist_is_about_axis(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            R = rm.exp_map(random_rotvec(rng))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            st = rm.swing_twist(R, axis)
            tv = rm.log_map(st.twist)
            # twist rotation vector is parallel to the axis
            assert np.linalg.norm(np.cross(tv, axis)) < 1e-9

    def test_swing_has_no_axis_component(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            R = rm.exp_map(random_rotvec(rng))
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            st = rm.swing_twist(R, axis)
            sv = rm.log_map(st.swing)
            assert abs(np.dot(sv, axis)) < 1e-9

    def test_degenerate_half_turn_perpendicular(self):
        axis = np.array([0.0, 0.0, 1.0])
        R = rm.exp_map(np.array([np.pi, 0.0, 0.0]))
        st = rm.swing_twist(R, axis)
        assert st.degenerate
        assert np.allclose(st.twist, np.eye(3), atol=1e-12)

    def test_rejects_non_unit_axis(self):
        with pytest.raises(ValueError):
            rm.swing_twist(np.eye(3), np.array([0.0, 0.0, 2.0]))


class TestQuaternions:
    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            R = rm.exp_map(random_rotvec(rng))
            assert np.abs(rm.matrix_from_quat(rm.quat_from_matrix(R)) - R).max() < 1e-12

    def test_round_trip_near_pi(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            v = random_rotvec(rng)
            v = v / np.linalg.norm(v) * (np.pi - 1e-9)
            R = rm.exp_map(v)
            assert np.abs(rm.matrix_from_quat(rm.quat_from_matrix(R)) - R).max() < 1e-9


class TestAngles:
    def test_twist_angle_sign(self):
        axis = np.array([0.0, 0.0, 1.0])
        R = rm.exp_map(-0.7 * axis)
        assert abs(rm.twist_angle(R, axis) + 0.7) < 1e-12

    def test_swing_angle_pure_swing(self):
        axis = np.array([0.0, 0.0, 1.0])
        R = rm.exp_map(np.array([0.2, 0.0, 0.0]))
        assert abs(rm.swing_angle(R, axis) - 0.2) < 1e-12


class TestRightJacobian:
    def test_perturbation_identity(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            v = random_rotvec(rng, max_angle=2.5)
            dv = rng.normal(size=3) * 1e-6
            J = rm.right_jacobian(v)
            lhs = rm.exp_map(v + dv)
            rhs = rm.exp_map(v) @ rm.exp_map(J @ dv)
            assert np.abs(lhs - rhs).max() < 1e-11

    def test_small_angle_limit(self):
        assert np.allclose(rm.right_jacobian(np.zeros(3)), np.eye(3))
