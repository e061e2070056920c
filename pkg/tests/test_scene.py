import json
import math

import numpy as np
import pytest

from evsplat.scene import (GaussianPrimitive, CameraIntrinsics, Scene,
                           SH_C0, covariance_of, init_scene, num_sh_coeffs,
                           sh_to_color)


def make_gaussian(rng, sh_degree=0):
    return GaussianPrimitive(position=rng.normal(size=3),
                             log_scale=rng.uniform(-2, 0.5, 3),
                             rotation=rng.normal(size=4),
                             opacity_logit=rng.normal(),
                             sh_coeffs=rng.normal(size=(3, num_sh_coeffs(sh_degree))))


class TestCovarianceOf:
    def test_identity_case(self):
        g = GaussianPrimitive(np.zeros(3), np.zeros(3),
                              np.array([1.0, 0, 0, 0]), 0.0, np.zeros((3, 1)))
        assert np.allclose(covariance_of(g), np.eye(3), atol=1e-15)

    def test_log2_scale_gives_diag4(self):
        g = GaussianPrimitive(np.zeros(3), np.array([math.log(2), 0.0, 0.0]),
                              np.array([1.0, 0, 0, 0]), 0.0, np.zeros((3, 1)))
        assert np.allclose(covariance_of(g), np.diag([4.0, 1.0, 1.0]))

    def test_eigenvalues_match_scales(self, rng):
        for _ in range(50):
            g = make_gaussian(rng)
            cov = covariance_of(g)
            eigs = np.sort(np.linalg.eigvalsh(cov))
            expect = np.sort(np.exp(2.0 * g.log_scale))
            assert np.allclose(eigs, expect, rtol=1e-9)

    def test_cholesky_on_10000_random_primitives(self, rng):
        for _ in range(10000):
            g = GaussianPrimitive(np.zeros(3), rng.uniform(-6, 3, 3),
                                  rng.normal(size=4), 0.0, np.zeros((3, 1)))
            np.linalg.cholesky(covariance_of(g))  # raises if not PD

    def test_symmetry(self, rng):
        for _ in range(100):
            cov = covariance_of(make_gaussian(rng))
            assert np.allclose(cov, cov.T, atol=0)


class TestShToColor:
    def test_degree0_view_independent_red(self, rng):
        sh = np.zeros((3, 1))
        sh[0, 0] = 0.5 / SH_C0   # red channel: C0 * coeff + 0.5 = 1
        sh[1, 0] = -0.5 / SH_C0  # green: 0
        sh[2, 0] = -0.5 / SH_C0
        g = GaussianPrimitive(np.zeros(3), np.zeros(3),
                              np.array([1.0, 0, 0, 0]), 0.0, sh)
        for _ in range(20):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            assert np.allclose(sh_to_color(g, d), [1.0, 0.0, 0.0], atol=1e-12)

    def test_degree1_z_coefficient_flips_sign(self):
        sh = np.zeros((3, 4))
        sh[:, 2] = 0.3  # the z-linear basis function
        g = GaussianPrimitive(np.zeros(3), np.zeros(3),
                              np.array([1.0, 0, 0, 0]), 0.0, sh)
        up = sh_to_color(g, np.array([0.0, 0.0, 1.0]))
        down = sh_to_color(g, np.array([0.0, 0.0, -1.0]))
        diff_up = up - 0.5
        diff_down = down - 0.5
        assert np.all(diff_up * diff_down < 0)
        assert np.allclose(diff_up, -diff_down, atol=1e-12)

    def test_all_zero_coeffs_give_gray(self):
        g = GaussianPrimitive(np.zeros(3), np.zeros(3),
                              np.array([1.0, 0, 0, 0]), 0.0, np.zeros((3, 9)))
        color = sh_to_color(g, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(color, 0.5)

    def test_clamped_at_zero(self):
        sh = np.full((3, 1), -10.0)
        g = GaussianPrimitive(np.zeros(3), np.zeros(3),
                              np.array([1.0, 0, 0, 0]), 0.0, sh)
        assert np.all(sh_to_color(g, np.array([0, 0, 1.0])) == 0.0)


class TestInitScene:
    def test_single_point_at_origin(self):
        scene = init_scene(points=[[0.0, 0.0, 0.0]])
        assert len(scene) == 1
        assert np.allclose(scene.gaussians[0].position, 0.0)
        assert scene.gaussians[0].opacity == pytest.approx(0.1)

    def test_fixed_seed_deterministic(self):
        a = init_scene(count=100, rng_seed=42)
        b = init_scene(count=100, rng_seed=42)
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())

    def test_nearest_neighbor_scale_two_points(self):
        k = 0.5
        scene = init_scene(points=[[0.0, 0, 0], [2.0, 0, 0]], scale_factor=k)
        for g in scene.gaussians:
            assert np.allclose(np.exp(g.log_scale), 2.0 * k)

    def test_nearest_neighbor_against_brute_force(self, rng):
        pts = rng.uniform(-1, 1, size=(40, 3))
        k = 0.5
        scene = init_scene(points=pts, scale_factor=k)
        # brute-force oracle for the mean nearest-neighbor distance
        dists = []
        for i in range(len(pts)):
            best = min(np.linalg.norm(pts[i] - pts[j])
                       for j in range(len(pts)) if j != i)
            dists.append(best)
        expect = float(np.mean(dists)) * k
        for g in scene.gaussians:
            assert np.allclose(np.exp(g.log_scale), expect, rtol=1e-12)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            init_scene(points=np.empty((0, 3)))
        with pytest.raises(ValueError):
            init_scene(count=0)


class TestSceneJson:
    def test_round_trip(self, rng):
        gaussians = [make_gaussian(rng, sh_degree=1) for _ in range(5)]
        scene = Scene(gaussians, rng.uniform(0, 1, 3), 1)
        back = Scene.from_json(scene.to_json())
        for a, b in zip(scene.gaussians, back.gaussians):
            assert np.allclose(a.position, b.position)
            assert np.allclose(a.sh_coeffs, b.sh_coeffs)
            assert np.allclose(a.rotation, b.rotation)
        assert back.sh_degree == 1

    def test_sh_shape_enforced(self, rng):
        g = make_gaussian(rng, sh_degree=0)
        with pytest.raises(ValueError):
            Scene([g], np.zeros(3), sh_degree=1)


class TestCameraIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=4, height=4)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=10, cy=0, width=4, height=4)
        CameraIntrinsics(fx=1, fy=1, cx=1.5, cy=1.5, width=4, height=4)
