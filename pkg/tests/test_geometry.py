import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsplat.geometry import (ExposureTrajectory, Pose, Twist,
                              interpolate_pose, latent_timestamps,
                              quat_multiply, se3_exp, se3_log)


def matrix_exp_series(xi: Twist, terms: int = 20) -> np.ndarray:
    """Independent oracle: truncated series of the 4x4 hat-matrix exponential."""
    hat = np.zeros((4, 4))
    wx, wy, wz = xi.omega
    hat[:3, :3] = [[0, -wz, wy], [wz, 0, -wx], [-wy, wx, 0]]
    hat[:3, 3] = xi.v
    out = np.eye(4)
    term = np.eye(4)
    for k in range(1, terms):
        term = term @ hat / k
        out = out + term
    return out


class TestSe3Exp:
    def test_zero_twist_is_identity(self):
        p = se3_exp(Twist.zero())
        assert np.allclose(p.q, [1, 0, 0, 0])
        assert np.allclose(p.t, 0)

    def test_pure_translation(self):
        p = se3_exp(Twist(np.zeros(3), np.array([1.0, 2.0, 3.0])))
        assert np.allclose(p.q, [1, 0, 0, 0])
        assert np.allclose(p.t, [1, 2, 3])

    def test_quarter_turn_about_z(self):
        p = se3_exp(Twist(np.array([0.0, 0.0, math.pi / 2]), np.zeros(3)))
        assert np.allclose(p.rotation_matrix() @ [1, 0, 0], [0, 1, 0],
                           atol=1e-12)

    def test_matches_matrix_exponential_series(self, rng):
        for _ in range(50):
            xi = Twist.from_array(rng.normal(size=6))
            if np.linalg.norm(xi.omega) >= math.pi:
                continue
            assert np.allclose(se3_exp(xi).matrix(), matrix_exp_series(xi),
                               atol=1e-12)

    def test_small_angle_branch_continuous(self):
        for eps in (1e-9, 1e-7, 1e-5):
            xi = Twist(np.array([eps, 0, 0]), np.array([0.5, -0.2, 0.1]))
            assert np.allclose(se3_exp(xi).matrix(), matrix_exp_series(xi),
                               atol=1e-14)


class TestSe3Log:
    def test_identity_gives_zero(self):
        xi = se3_log(Pose.identity())
        assert np.allclose(xi.as_array(), 0)

    def test_pure_translation_has_zero_rotation(self):
        xi = se3_log(Pose(np.array([1.0, 0, 0, 0]), np.array([0.3, 1.0, -2.0])))
        assert np.allclose(xi.omega, 0)
        assert np.allclose(xi.v, [0.3, 1.0, -2.0])

    def test_round_trip_1000_random_twists(self, rng):
        for _ in range(1000):
            xi = rng.normal(size=6)
            if np.linalg.norm(xi[:3]) >= 3.0:
                xi[:3] *= 2.9 / np.linalg.norm(xi[:3])
            back = se3_log(se3_exp(Twist.from_array(xi)))
            assert np.allclose(back.as_array(), xi, atol=1e-7)

    def test_degenerate_at_pi(self):
        pose = se3_exp(Twist(np.array([math.pi, 0, 0]), np.zeros(3)))
        with pytest.raises(ValueError):
            se3_log(pose)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1.4, 1.4), min_size=6, max_size=6))
def test_exp_log_inverse_property(values):
    xi = np.array(values)
    back = se3_log(se3_exp(Twist.from_array(xi)))
    assert np.allclose(back.as_array(), xi, atol=1e-7)


class TestPose:
    def test_quaternion_normalized_after_operations(self, rng):
        for _ in range(100):
            a = Pose(rng.normal(size=4), rng.normal(size=3))
            b = Pose(rng.normal(size=4), rng.normal(size=3))
            for p in (a, b, a.compose(b), a.inverse(), b.inverse().compose(a)):
                assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9

    def test_compose_with_inverse_is_identity(self, rng):
        for _ in range(100):
            p = Pose(rng.normal(size=4), rng.normal(size=3))
            ident = p.compose(p.inverse())
            assert abs(abs(ident.q[0]) - 1.0) < 1e-9
            assert np.linalg.norm(ident.t) < 1e-9

    def test_matrix_round_trip(self, rng):
        for _ in range(50):
            p = Pose(rng.normal(size=4), rng.normal(size=3))
            back = Pose.from_matrix(p.matrix())
            assert np.allclose(back.q, p.q, atol=1e-12)
            assert np.allclose(back.t, p.t, atol=1e-12)

    def test_scalar_first_convention(self):
        # quarter turn about z as (w, x, y, z); maps +x to +y in camera frame
        q = np.array([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)])
        p = Pose(q, np.zeros(3))
        assert np.allclose(p.apply(np.array([1.0, 0, 0])), [0, 1, 0],
                           atol=1e-12)

    def test_json_round_trip(self, rng):
        p = Pose(rng.normal(size=4), rng.normal(size=3))
        back = Pose.from_json(p.to_json())
        assert np.allclose(back.q, p.q)
        assert np.allclose(back.t, p.t)


class TestExposureTrajectory:
    def test_rejects_empty_window(self):
        with pytest.raises(ValueError):
            ExposureTrajectory(Pose.identity(), Pose.identity(), 1.0, 1.0)

    def test_mid_time_inside_window(self):
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.2, 0.7)
        assert traj.t_start < traj.mid_time < traj.t_end
        assert traj.duration == pytest.approx(0.5)


class TestInterpolatePose:
    def _traj(self, rng):
        a = se3_exp(Twist.from_array(rng.normal(size=6) * 0.5))
        b = a.compose(se3_exp(Twist.from_array(rng.normal(size=6) * 0.4)))
        return ExposureTrajectory(a, b, 0.0, 1.0)

    def test_endpoints(self, rng):
        for _ in range(20):
            traj = self._traj(rng)
            p0 = interpolate_pose(traj, traj.t_start)
            p1 = interpolate_pose(traj, traj.t_end)
            assert np.allclose(p0.matrix(), traj.pose_start.matrix(), atol=1e-12)
            assert np.allclose(p1.matrix(), traj.pose_end.matrix(), atol=1e-9)

    def test_midpoint_of_pure_translations(self):
        a = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]))
        b = Pose(np.array([1.0, 0, 0, 0]), np.array([2.0, 4.0, 1.0]))
        traj = ExposureTrajectory(a, b, 0.0, 2.0)
        mid = interpolate_pose(traj, 1.0)
        assert np.allclose(mid.t, [1.0, 2.0, 1.0], atol=1e-12)

    def test_outside_window_rejected(self, rng):
        traj = self._traj(rng)
        with pytest.raises(ValueError):
            interpolate_pose(traj, traj.t_end + 0.01)
        with pytest.raises(ValueError):
            interpolate_pose(traj, traj.t_start - 0.01)

    def test_mid_sample_is_geodesic_midpoint(self, rng):
        for _ in range(20):
            traj = self._traj(rng)
            n = 5
            t_mid = latent_timestamps(traj, n)[(n - 1) // 2]
            mid = interpolate_pose(traj, t_mid)
            # geodesic midpoint: start o exp(xi/2)
            xi = se3_log(traj.pose_start.inverse().compose(traj.pose_end))
            expect = traj.pose_start.compose(
                se3_exp(Twist(xi.omega / 2, xi.v / 2)))
            assert np.allclose(mid.matrix(), expect.matrix(), atol=1e-12)

    def test_reparameterization_consistency(self, rng):
        for _ in range(20):
            traj = self._traj(rng)
            shift = rng.uniform(-5, 5)
            shifted = ExposureTrajectory(traj.pose_start, traj.pose_end,
                                         traj.t_start + shift,
                                         traj.t_end + shift)
            t = rng.uniform(traj.t_start, traj.t_end)
            a = interpolate_pose(traj, t)
            b = interpolate_pose(shifted, t + shift)
            assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)


class TestLatentTimestamps:
    def test_five_over_unit_interval(self):
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.0, 1.0)
        assert latent_timestamps(traj, 5) == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_single_sample_is_mid_exposure(self):
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.0, 2.0)
        assert latent_timestamps(traj, 1) == [1.0]

    def test_seven_middle_element(self):
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.1, 0.8)
        times = latent_timestamps(traj, 7)
        assert times[3] == pytest.approx(0.45, abs=1e-15)

    def test_even_count_rejected(self):
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.0, 1.0)
        for n in (0, 2, 4, -1):
            with pytest.raises(ValueError):
                latent_timestamps(traj, n)

    def test_mid_exposure_always_sampled(self):
        traj = ExposureTrajectory(Pose.identity(), Pose.identity(), 0.3, 0.9)
        for n in (1, 3, 5, 7, 9):
            times = latent_timestamps(traj, n)
            assert times[(n - 1) // 2] == traj.mid_time


def test_quat_multiply_identity(rng):
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    assert np.allclose(quat_multiply(q, np.array([1.0, 0, 0, 0])), q)
