"""Explicit Gaussian scene representation and its parameter-to-geometry maps.

Scale lives in log-space and opacity as a logit so unconstrained gradient
steps keep the covariance positive definite and the opacity in (0, 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_normalize, quat_to_matrix

# real spherical harmonic constants, degree 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (..., (degree+1)^2)."""
    d = np.asarray(view_dir, dtype=float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y,
                SH_C2[1] * y * z,
                SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z,
                SH_C2[4] * (xx - yy)]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy)]
    return np.stack(out, axis=-1)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class GaussianPrimitive:
    """One anisotropic 3D Gaussian.

    sh_coeffs has shape (3, (degree+1)^2): one coefficient row per color
    channel, DC term first.
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion, scalar first
    opacity_logit: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.log_scale = np.asarray(self.log_scale, dtype=float)
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=float))
        self.sh_coeffs = np.atleast_2d(np.asarray(self.sh_coeffs, dtype=float))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                                int(d["width"]), int(d["height"]))


@dataclass
class Scene:
    gaussians: list[GaussianPrimitive]
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = 1

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=float)
        k = num_sh_coeffs(self.sh_degree)
        for g in self.gaussians:
            if g.sh_coeffs.shape != (3, k):
                raise ValueError(f"sh_coeffs shape {g.sh_coeffs.shape} does not "
                                 f"match sh_degree {self.sh_degree}")

    def __len__(self) -> int:
        return len(self.gaussians)

    # array views used by the renderer and the trainer -----------------------

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "position": np.array([g.position for g in self.gaussians]),
            "log_scale": np.array([g.log_scale for g in self.gaussians]),
            "rotation": np.array([g.rotation for g in self.gaussians]),
            "opacity_logit": np.array([g.opacity_logit for g in self.gaussians]),
            "sh": np.array([g.sh_coeffs for g in self.gaussians]),
        }

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray], background_color,
                    sh_degree: int) -> "Scene":
        n = arrays["position"].shape[0]
        gaussians = [GaussianPrimitive(arrays["position"][i],
                                       arrays["log_scale"][i],
                                       arrays["rotation"][i],
                                       float(arrays["opacity_logit"][i]),
                                       arrays["sh"][i])
                     for i in range(n)]
        return Scene(gaussians, background_color, sh_degree)

    # serialization -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "sh_degree": self.sh_degree,
            "background": [float(v) for v in self.background_color],
            "gaussians": [{
                "pos": [float(v) for v in g.position],
                "log_scale": [float(v) for v in g.log_scale],
                "q": [float(v) for v in g.rotation],
                "opacity_logit": float(g.opacity_logit),
                "sh": [[float(v) for v in row] for row in g.sh_coeffs],
            } for g in self.gaussians],
        }

    @staticmethod
    def from_json(d: dict) -> "Scene":
        gaussians = [GaussianPrimitive(np.array(g["pos"]),
                                       np.array(g["log_scale"]),
                                       np.array(g["q"]),
                                       float(g["opacity_logit"]),
                                       np.array(g["sh"]))
                     for g in d["gaussians"]]
        return Scene(gaussians, np.array(d["background"]), int(d["sh_degree"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @staticmethod
    def load(path) -> "Scene":
        with open(path) as f:
            return Scene.from_json(json.load(f))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def covariance_of(g: GaussianPrimitive) -> np.ndarray:
    """World-space covariance R S^2 R^T, symmetric PSD by construction."""
    R = quat_to_matrix(g.rotation)
    M = R * np.exp(g.log_scale)[None, :]
    return M @ M.T


def sh_to_color(g: GaussianPrimitive, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate the SH color along a unit view direction; degree-0 convention
    adds the 0.5 gray offset, and the result is clamped below at zero."""
    degree = int(math.isqrt(g.sh_coeffs.shape[1])) - 1
    basis = sh_basis(view_dir, degree)
    return np.maximum(g.sh_coeffs @ basis + 0.5, 0.0)


def init_scene(points=None, count: int | None = None, rng_seed: int = 0,
               bounds: float = 1.0, colors=None, sh_degree: int = 1,
               background_color=(0.0, 0.0, 0.0),
               scale_factor: float = 0.5) -> Scene:
    """Seed a scene with one Gaussian per point.

    Either explicit points or a count drawn uniformly inside [-bounds, bounds]^3.
    Scales come from the mean nearest-neighbor distance times scale_factor,
    opacity starts at 0.1, color at gray unless colors are given.
    """
    rng = np.random.default_rng(rng_seed)
    if points is None:
        if count is None or count < 1:
            raise ValueError("need explicit points or count >= 1")
        points = rng.uniform(-bounds, bounds, size=(count, 3))
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] != 3:
        raise ValueError("points must be a non-empty (N, 3) array")

    n = points.shape[0]
    if n > 1:
        from scipy.spatial import cKDTree
        dist, _ = cKDTree(points).query(points, k=2)
        scale = float(np.mean(dist[:, 1])) * scale_factor
    else:
        scale = 0.1 * scale_factor

    k = num_sh_coeffs(sh_degree)
    if colors is None:
        colors = np.full((n, 3), 0.5)
    colors = np.asarray(colors, dtype=float)

    gaussians = []
    for i in range(n):
        sh = np.zeros((3, k))
        sh[:, 0] = (colors[i] - 0.5) / SH_C0
        gaussians.append(GaussianPrimitive(
            position=points[i],
            log_scale=np.full(3, math.log(scale)),
            rotation=np.array([1.0, 0.0, 0.0, 0.0]),
            opacity_logit=logit(0.1),
            sh_coeffs=sh,
        ))
    return Scene(gaussians, np.asarray(background_color, dtype=float), sh_degree)
