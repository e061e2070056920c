import numpy as np
import pytest

from evsplat.geometry import ExposureTrajectory, Pose, Twist, se3_exp
from evsplat.scene import CameraIntrinsics, GaussianPrimitive, Scene, num_sh_coeffs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_random_scene(rng, n=3, sh_degree=1, background=None):
    """Gaussians in front of a camera at z ~ 2.5; opacities kept away from
    the 0.99 cap and the 1/255 skip threshold so gradients stay smooth."""
    k = num_sh_coeffs(sh_degree)
    gaussians = [
        GaussianPrimitive(
            position=rng.uniform(-0.5, 0.5, 3),
            log_scale=rng.uniform(np.log(0.08), np.log(0.3), 3),
            rotation=rng.normal(size=4),
            opacity_logit=rng.uniform(-1.0, 1.5),
            sh_coeffs=rng.uniform(-0.6, 0.6, (3, k)),
        )
        for _ in range(n)
    ]
    if background is None:
        background = rng.uniform(0.0, 0.3, 3)
    return Scene(gaussians, background, sh_degree)


def make_camera(width=16, height=16, f=20.0):
    return CameraIntrinsics(fx=f, fy=f * 1.1, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def make_trajectory(rng, rot_scale=0.02, trans_scale=0.01, t_start=0.0,
                    t_end=0.1):
    """Small random sweep around a camera 2.5 units from the origin."""
    base = Pose(np.array([1.0, 0.02, -0.03, 0.01]),
                np.array([0.05, -0.02, 2.5]))
    d = rng.normal(size=6) * np.array([rot_scale] * 3 + [trans_scale] * 3)
    return ExposureTrajectory(
        se3_exp(Twist.from_array(-d / 2)).compose(base),
        se3_exp(Twist.from_array(d / 2)).compose(base),
        t_start, t_end)


def fd_tolerance_ok(analytic, numeric, rel=1e-3, floor=1e-8):
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric)) + floor
