"""Differentiable forward splatting on the CPU.

Forward path: project Gaussians through the camera, depth-sort globally,
alpha-composite front to back per pixel, and synthesize motion blur as the
average of sharp renders along the exposure trajectory. Backward path:
hand-derived reverse-mode partials for every Gaussian parameter and for
left-perturbation twists of the two trajectory endpoint poses.

Rasterizer conventions: per-pixel opacity is capped at 0.99, contributions
below 1/255 are skipped, and a low-pass floor of 0.3 px^2 is added to the
projected covariance diagonal. Footprints are truncated at the exact radius
where the contribution falls under the 1/255 skip threshold (about 3.3
sigma), so truncation never removes a visible contribution and the output
matches an untruncated per-pixel evaluation to float precision. The depth
sort is treated as locally constant by the backward pass, a known
non-smoothness shared with the usual splatting formulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import (ExposureTrajectory, Pose, Twist,
                       interpolation_endpoint_jacobians, interpolate_pose,
                       latent_timestamps, skew)
from .image import RadianceImage
from .scene import (CameraIntrinsics, GaussianPrimitive, Scene, num_sh_coeffs,
                    sh_basis, sigmoid)

NEAR_PLANE = 0.01
ALPHA_CAP = 0.99
ALPHA_SKIP = 1.0 / 255.0
COV2D_FLOOR = 0.3


@dataclass
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float


@dataclass
class GradientBuffer:
    """Partials of an adjoint-weighted pixel sum, aligned with the scene's
    Gaussian order, plus the two endpoint twist partials of the trajectory."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    twist_start: Twist
    twist_end: Twist
    loss: float

    def validate(self) -> "GradientBuffer":
        for name in ("position", "log_scale", "rotation", "opacity_logit", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite gradient in {name}")
        if not (np.all(np.isfinite(self.twist_start.as_array()))
                and np.all(np.isfinite(self.twist_end.as_array()))):
            raise ValueError("non-finite twist gradient")
        return self

    @staticmethod
    def zeros(n: int, sh_coeffs: int) -> "GradientBuffer":
        return GradientBuffer(np.zeros((n, 3)), np.zeros((n, 3)),
                              np.zeros((n, 4)), np.zeros(n),
                              np.zeros((n, 3, sh_coeffs)),
                              Twist.zero(), Twist.zero(), 0.0)

    def add_(self, other: "GradientBuffer") -> "GradientBuffer":
        self.position += other.position
        self.log_scale += other.log_scale
        self.rotation += other.rotation
        self.opacity_logit += other.opacity_logit
        self.sh += other.sh
        self.twist_start = Twist.from_array(
            self.twist_start.as_array() + other.twist_start.as_array())
        self.twist_end = Twist.from_array(
            self.twist_end.as_array() + other.twist_end.as_array())
        self.loss += other.loss
        return self


# ---------------------------------------------------------------------------
# composite kernels (sequential per pixel; deterministic)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _forward_kernel(means, qpack, alphas, colors, bboxes, rmax2, bg, height, width):
    img = np.zeros((height, width, 3))
    tfinal = np.empty((height, width))
    n = means.shape[0]
    for py in range(height):
        for px in range(width):
            trans = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for i in range(n):
                if px < bboxes[i, 0] or px > bboxes[i, 1] \
                        or py < bboxes[i, 2] or py > bboxes[i, 3]:
                    continue
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                quad = (qpack[i, 0] * dx * dx + 2.0 * qpack[i, 1] * dx * dy
                        + qpack[i, 2] * dy * dy)
                if quad > rmax2[i] + 0.2:  # conservative pre-test before exp
                    continue
                au = alphas[i] * math.exp(-0.5 * quad)
                if au > ALPHA_CAP:
                    au = ALPHA_CAP
                if au < ALPHA_SKIP:
                    continue
                w = au * trans
                c0 += w * colors[i, 0]
                c1 += w * colors[i, 1]
                c2 += w * colors[i, 2]
                trans *= 1.0 - au
            img[py, px, 0] = c0 + trans * bg[0]
            img[py, px, 1] = c1 + trans * bg[1]
            img[py, px, 2] = c2 + trans * bg[2]
            tfinal[py, px] = trans
    return img, tfinal


@njit(cache=True)
def _backward_kernel(means, qpack, alphas, colors, bboxes, rmax2, bg, adj,
                     height, width):
    n = means.shape[0]
    dcolor = np.zeros((n, 3))
    dalpha = np.zeros(n)
    dmean = np.zeros((n, 2))
    dq = np.zeros((n, 3))
    idxbuf = np.empty(n, np.int64)
    aubuf = np.empty(n)
    gbuf = np.empty(n)
    tbuf = np.empty(n)
    for py in range(height):
        for px in range(width):
            a0 = adj[py, px, 0]
            a1 = adj[py, px, 1]
            a2 = adj[py, px, 2]
            if a0 == 0.0 and a1 == 0.0 and a2 == 0.0:
                continue
            cnt = 0
            trans = 1.0
            for i in range(n):
                if px < bboxes[i, 0] or px > bboxes[i, 1] \
                        or py < bboxes[i, 2] or py > bboxes[i, 3]:
                    continue
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                quad = (qpack[i, 0] * dx * dx + 2.0 * qpack[i, 1] * dx * dy
                        + qpack[i, 2] * dy * dy)
                if quad > rmax2[i] + 0.2:
                    continue
                g = math.exp(-0.5 * quad)
                au = alphas[i] * g
                if au > ALPHA_CAP:
                    au = ALPHA_CAP
                if au < ALPHA_SKIP:
                    continue
                idxbuf[cnt] = i
                aubuf[cnt] = au
                gbuf[cnt] = g
                tbuf[cnt] = trans
                cnt += 1
                trans *= 1.0 - au
            # composite behind the current Gaussian, channelwise
            s0 = trans * bg[0]
            s1 = trans * bg[1]
            s2 = trans * bg[2]
            for j in range(cnt - 1, -1, -1):
                i = idxbuf[j]
                au = aubuf[j]
                g = gbuf[j]
                tb = tbuf[j]
                w = au * tb
                dcolor[i, 0] += a0 * w
                dcolor[i, 1] += a1 * w
                dcolor[i, 2] += a2 * w
                gamma = a0 * colors[i, 0] + a1 * colors[i, 1] + a2 * colors[i, 2]
                dau = gamma * tb - (a0 * s0 + a1 * s1 + a2 * s2) / (1.0 - au)
                if alphas[i] * g < ALPHA_CAP:  # the 0.99 cap freezes these
                    dalpha[i] += dau * g
                    dquad = -0.5 * dau * alphas[i] * g
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    dmean[i, 0] -= dquad * 2.0 * (qpack[i, 0] * dx + qpack[i, 1] * dy)
                    dmean[i, 1] -= dquad * 2.0 * (qpack[i, 1] * dx + qpack[i, 2] * dy)
                    dq[i, 0] += dquad * dx * dx
                    dq[i, 1] += dquad * 2.0 * dx * dy
                    dq[i, 2] += dquad * dy * dy
                s0 += w * colors[i, 0]
                s1 += w * colors[i, 1]
                s2 += w * colors[i, 2]
    return dcolor, dalpha, dmean, dq


# ---------------------------------------------------------------------------
# per-view projection (vectorized over Gaussians)
# ---------------------------------------------------------------------------

class _ViewProjection:
    """Everything the kernels and the backward chains need for one pose."""

    __slots__ = ("pose", "K", "sh_degree", "n", "valid", "order", "R", "t",
                 "cam_center", "qhat", "qnorm", "Rg", "S", "M3", "Sigma", "pc",
                 "mean2d", "J", "M", "cov2d", "Q", "alpha", "basis", "view_dir",
                 "wnorm", "colors_raw", "colors", "bboxes", "rmax2", "arrays")

    def __init__(self, arrays, sh_degree, pose, K):
        self.arrays = arrays
        self.pose = pose
        self.K = K
        self.sh_degree = sh_degree
        pos = arrays["position"]
        n = pos.shape[0]
        self.n = n

        R = pose.rotation_matrix()
        t = pose.t
        self.R, self.t = R, t
        self.cam_center = -(R.T @ t)

        q = arrays["rotation"]
        self.qnorm = np.linalg.norm(q, axis=1)
        self.qhat = q / self.qnorm[:, None]
        self.Rg = _quat_to_matrix_batch(self.qhat)
        self.S = np.exp(arrays["log_scale"])
        self.M3 = self.Rg * self.S[:, None, :]
        self.Sigma = np.einsum("nij,nkj->nik", self.M3, self.M3)

        self.pc = pos @ R.T + t
        zok = self.pc[:, 2] > NEAR_PLANE
        z = np.where(zok, self.pc[:, 2], 1.0)
        x, y = self.pc[:, 0], self.pc[:, 1]
        fx, fy = K.fx, K.fy
        self.mean2d = np.stack([fx * x / z + K.cx, fy * y / z + K.cy], axis=1)

        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = fx / z
        J[:, 0, 2] = -fx * x / (z * z)
        J[:, 1, 1] = fy / z
        J[:, 1, 2] = -fy * y / (z * z)
        self.J = J
        self.M = np.einsum("nij,jk->nik", J, R)
        cov2d = np.einsum("nij,njk,nlk->nil", self.M, self.Sigma, self.M)
        cov2d[:, 0, 0] += COV2D_FLOOR
        cov2d[:, 1, 1] += COV2D_FLOOR
        self.cov2d = cov2d
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        Q = np.empty_like(cov2d)
        Q[:, 0, 0] = cov2d[:, 1, 1] / det
        Q[:, 1, 1] = cov2d[:, 0, 0] / det
        Q[:, 0, 1] = Q[:, 1, 0] = -cov2d[:, 0, 1] / det
        self.Q = Q

        self.alpha = sigmoid(arrays["opacity_logit"])

        wvec = pos - self.cam_center[None, :]
        self.wnorm = np.linalg.norm(wvec, axis=1)
        self.view_dir = wvec / self.wnorm[:, None]
        self.basis = sh_basis(self.view_dir, sh_degree)
        self.colors_raw = np.einsum("nck,nk->nc", arrays["sh"], self.basis) + 0.5
        self.colors = np.maximum(self.colors_raw, 0.0)

        # visibility footprint: alpha * g >= 1/255  <=>  quad <= rmax2
        visible = self.alpha * 255.0 > 1.0
        self.rmax2 = np.where(visible,
                              2.0 * np.log(np.maximum(self.alpha, 1e-12) * 255.0),
                              -1.0)
        hw = np.sqrt(np.maximum(self.rmax2, 0.0)[:, None]
                     * np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1)) + 1e-6
        bboxes = np.empty((n, 4), dtype=np.int64)
        bboxes[:, 0] = np.ceil(self.mean2d[:, 0] - hw[:, 0])
        bboxes[:, 1] = np.floor(self.mean2d[:, 0] + hw[:, 0])
        bboxes[:, 2] = np.ceil(self.mean2d[:, 1] - hw[:, 1])
        bboxes[:, 3] = np.floor(self.mean2d[:, 1] + hw[:, 1])
        np.clip(bboxes[:, 0], 0, K.width - 1, out=bboxes[:, 0])
        np.clip(bboxes[:, 1], -1, K.width - 1, out=bboxes[:, 1])
        np.clip(bboxes[:, 2], 0, K.height - 1, out=bboxes[:, 2])
        np.clip(bboxes[:, 3], -1, K.height - 1, out=bboxes[:, 3])
        on_image = (self.mean2d[:, 0] - hw[:, 0] <= K.width - 1) \
            & (self.mean2d[:, 0] + hw[:, 0] >= 0) \
            & (self.mean2d[:, 1] - hw[:, 1] <= K.height - 1) \
            & (self.mean2d[:, 1] + hw[:, 1] >= 0)
        self.bboxes = bboxes
        self.valid = zok & visible & on_image
        self.order = np.flatnonzero(self.valid)[
            np.argsort(self.pc[self.valid, 2], kind="stable")]

    def kernel_args(self):
        o = self.order
        qpack = np.stack([self.Q[o, 0, 0], self.Q[o, 0, 1], self.Q[o, 1, 1]],
                         axis=1)
        return (np.ascontiguousarray(self.mean2d[o]),
                np.ascontiguousarray(qpack),
                np.ascontiguousarray(self.alpha[o]),
                np.ascontiguousarray(self.colors[o]),
                np.ascontiguousarray(self.bboxes[o]),
                np.ascontiguousarray(self.rmax2[o]))


def _quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def _quat_matrix_partials(qhat: np.ndarray) -> np.ndarray:
    """dR/dq for the unit-quaternion rotation formula, shape (n, 4, 3, 3)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def sh_basis_grad(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction for unit directions, shape (n, K, 3)."""
    d = np.asarray(view_dir, dtype=float)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [np.stack([zero, zero, zero], axis=1)]
    if degree >= 1:
        from .scene import SH_C1
        rows += [np.stack([zero, -SH_C1 * one, zero], axis=1),
                 np.stack([zero, zero, SH_C1 * one], axis=1),
                 np.stack([-SH_C1 * one, zero, zero], axis=1)]
    if degree >= 2:
        from .scene import SH_C2
        rows += [np.stack([SH_C2[0] * y, SH_C2[0] * x, zero], axis=1),
                 np.stack([zero, SH_C2[1] * z, SH_C2[1] * y], axis=1),
                 np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y,
                           4 * SH_C2[2] * z], axis=1),
                 np.stack([SH_C2[3] * z, zero, SH_C2[3] * x], axis=1),
                 np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero], axis=1)]
    if degree >= 3:
        from .scene import SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            np.stack([6 * SH_C3[0] * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero],
                     axis=1),
            np.stack([SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
                     axis=1),
            np.stack([-2 * SH_C3[2] * x * y,
                      SH_C3[2] * (4 * zz - xx - 3 * yy),
                      8 * SH_C3[2] * y * z], axis=1),
            np.stack([-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z,
                      SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)], axis=1),
            np.stack([SH_C3[4] * (4 * zz - 3 * xx - yy),
                      -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z], axis=1),
            np.stack([2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z,
                      SH_C3[5] * (xx - yy)], axis=1),
            np.stack([SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero],
                     axis=1),
        ]
    return np.stack(rows, axis=1)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def project_gaussian(g: GaussianPrimitive, pose: Pose, K: CameraIntrinsics,
                     near: float = NEAR_PLANE) -> Projected2D | None:
    """Project one Gaussian; None when culled (behind the near plane or its
    visible footprint misses the image)."""
    sh_degree = int(math.isqrt(g.sh_coeffs.shape[1])) - 1
    arrays = {
        "position": g.position[None], "log_scale": g.log_scale[None],
        "rotation": g.rotation[None],
        "opacity_logit": np.array([g.opacity_logit]),
        "sh": g.sh_coeffs[None],
    }
    prep = _ViewProjection(arrays, sh_degree, pose, K)
    if g.position @ pose.rotation_matrix().T[:, 2] + pose.t[2] <= near:
        return None
    if not prep.valid[0]:
        return None
    return Projected2D(mean2d=prep.mean2d[0], cov2d=prep.cov2d[0],
                       depth=float(prep.pc[0, 2]), color=prep.colors[0],
                       alpha=float(prep.alpha[0]))


def _render_prep(prep: _ViewProjection) -> tuple[np.ndarray, np.ndarray]:
    bg = np.asarray(prep.arrays["background"], dtype=float)
    img, tfinal = _forward_kernel(*prep.kernel_args(), bg,
                                  prep.K.height, prep.K.width)
    return img, tfinal


def _prep_scene(scene: Scene, pose: Pose, K: CameraIntrinsics) -> _ViewProjection:
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    arrays = scene.to_arrays()
    arrays["background"] = scene.background_color
    return _ViewProjection(arrays, scene.sh_degree, pose, K)


def render(scene: Scene, pose: Pose, K: CameraIntrinsics) -> RadianceImage:
    img, _ = _render_prep(_prep_scene(scene, pose, K))
    return RadianceImage(img)


def render_transmittance(scene: Scene, pose: Pose,
                         K: CameraIntrinsics) -> tuple[RadianceImage, np.ndarray]:
    """Render plus the per-pixel remaining transmittance (for invariants)."""
    img, tfinal = _render_prep(_prep_scene(scene, pose, K))
    return RadianceImage(img), tfinal


def _is_static(traj: ExposureTrajectory) -> bool:
    return np.array_equal(traj.pose_start.q, traj.pose_end.q) \
        and np.array_equal(traj.pose_start.t, traj.pose_end.t)


def render_latents(scene: Scene, traj: ExposureTrajectory, n: int,
                   K: CameraIntrinsics) -> list[RadianceImage]:
    """Sharp renders at the n latent timestamps of the exposure. A static
    trajectory renders once and replicates, keeping the equal-sample identity
    exact in floating point."""
    if _is_static(traj):
        latent_timestamps(traj, n)  # still validates n
        return [render(scene, traj.pose_start, K)] * n
    return [render(scene, interpolate_pose(traj, t), K)
            for t in latent_timestamps(traj, n)]


def render_blurred(scene: Scene, traj: ExposureTrajectory, n: int,
                   K: CameraIntrinsics) -> RadianceImage:
    """Blur synthesis: the mean of the n latent sharp renders."""
    latents = render_latents(scene, traj, n, K)
    if _is_static(traj):
        return latents[0]
    return RadianceImage(np.mean([im.data for im in latents], axis=0))


def _backward_pose(prep: _ViewProjection, adjoint: np.ndarray,
                   grad: GradientBuffer) -> np.ndarray:
    """Accumulate parameter partials for one pose into grad; returns the
    6-vector partial with respect to a left-perturbation twist of the pose."""
    dcolor_s, dalpha_s, dmean_s, dqp_s = _backward_kernel(
        *prep.kernel_args(), np.asarray(prep.arrays["background"], dtype=float),
        np.ascontiguousarray(adjoint), prep.K.height, prep.K.width)

    n = prep.n
    o = prep.order
    dcolor = np.zeros((n, 3))
    dalpha = np.zeros(n)
    dmean2d = np.zeros((n, 2))
    dQ = np.zeros((n, 2, 2))
    dcolor[o] = dcolor_s
    dalpha[o] = dalpha_s
    dmean2d[o] = dmean_s
    dQ[o, 0, 0] = dqp_s[:, 0]
    dQ[o, 0, 1] = dQ[o, 1, 0] = 0.5 * dqp_s[:, 1]
    dQ[o, 1, 1] = dqp_s[:, 2]

    # opacity: alpha = sigmoid(logit)
    grad.opacity_logit += dalpha * prep.alpha * (1.0 - prep.alpha)

    # color: clamp at zero, then SH basis and view direction
    live = (prep.colors_raw > 0.0).astype(float)
    dcol = dcolor * live
    grad.sh += np.einsum("nc,nk->nck", dcol, prep.basis)
    dbasis = np.einsum("nc,nck->nk", dcol, prep.arrays["sh"])
    ddir = np.einsum("nk,nkd->nd", dbasis, sh_basis_grad(prep.view_dir,
                                                         prep.sh_degree))
    # direction = w / |w|, w = position - cam_center
    dw = (ddir - prep.view_dir
          * np.einsum("nd,nd->n", prep.view_dir, ddir)[:, None]) \
        / prep.wnorm[:, None]
    dpos = dw.copy()
    dcam_center = -dw.sum(axis=0)

    # precision matrix Q = inv(cov2d)
    dcov2d = -np.einsum("nij,njk,nkl->nil", prep.Q, dQ, prep.Q)

    # cov2d = M Sigma M^T + floor
    dSigma = np.einsum("nji,njk,nkl->nil", prep.M, dcov2d, prep.M)
    dM = 2.0 * np.einsum("nij,njk,nkl->nil", dcov2d, prep.M, prep.Sigma)

    # M = J R
    dJ = np.einsum("nij,kj->nik", dM, prep.R)
    dR = np.einsum("nji,njk->ik", prep.J, dM)  # summed over Gaussians

    # mean2d = pinhole(pc); J also depends on pc
    dpc = np.einsum("nji,nj->ni", prep.J, dmean2d)
    x, y = prep.pc[:, 0], prep.pc[:, 1]
    z = np.where(prep.pc[:, 2] > NEAR_PLANE, prep.pc[:, 2], 1.0)
    fx, fy = prep.K.fx, prep.K.fy
    z2 = z * z
    dpc[:, 0] += dJ[:, 0, 2] * (-fx / z2)
    dpc[:, 1] += dJ[:, 1, 2] * (-fy / z2)
    dpc[:, 2] += (dJ[:, 0, 0] * (-fx / z2) + dJ[:, 0, 2] * (2 * fx * x / (z2 * z))
                  + dJ[:, 1, 1] * (-fy / z2) + dJ[:, 1, 2] * (2 * fy * y / (z2 * z)))

    # pc = R position + t
    dpos += dpc @ prep.R
    dR += np.einsum("ni,nj->ij", dpc, prep.arrays["position"])
    dt = dpc.sum(axis=0)

    grad.position += dpos

    # Sigma = M3 M3^T, M3 = Rg diag(S)
    dM3 = 2.0 * np.einsum("nij,njk->nik", dSigma, prep.M3)
    dRg = dM3 * prep.S[:, None, :]
    dS = np.einsum("nij,nij->nj", dM3, prep.Rg)
    grad.log_scale += dS * prep.S

    # Rg(qhat), qhat = q / |q|
    dqhat = np.einsum("nij,nqij->nq", dRg, _quat_matrix_partials(prep.qhat))
    grad.rotation += (dqhat - prep.qhat
                      * np.einsum("nq,nq->n", prep.qhat, dqhat)[:, None]) \
        / prep.qnorm[:, None]

    # camera center o = -R^T t feeds the view directions
    dR += -np.outer(prep.t, dcam_center)
    dt += -(prep.R @ dcam_center)

    # left perturbation: R' = (I + [dw]x) R, t' = (I + [dw]x) t + dv
    dtwist = np.zeros(6)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        E = skew(e)
        dtwist[k] = float(np.sum(dR * (E @ prep.R)) + dt @ (E @ prep.t))
    dtwist[3:] = dt
    return dtwist


class LatentRenderContext:
    """Forward-renders the n latent images of one exposure and keeps the
    per-pose projections so a later backward pass does not re-render."""

    def __init__(self, scene: Scene, traj: ExposureTrajectory,
                 K: CameraIntrinsics, n: int):
        self.scene = scene
        self.traj = traj
        self.K = K
        self.times = latent_timestamps(traj, n)
        if _is_static(traj):
            prep = _prep_scene(scene, traj.pose_start, K)
            self.preps = [prep] * n
            self.latents = [RadianceImage(_render_prep(prep)[0])] * n
        else:
            self.preps = [_prep_scene(scene, interpolate_pose(traj, t), K)
                          for t in self.times]
            self.latents = [RadianceImage(_render_prep(p)[0])
                            for p in self.preps]

    def backward(self, adjoints: list[np.ndarray]) -> GradientBuffer:
        """Partials of sum_i <adjoint_i, C_i> for all Gaussian parameters and
        the two endpoint twists of the trajectory."""
        if len(adjoints) != len(self.times):
            raise ValueError("one adjoint image per latent render required")
        grad = GradientBuffer.zeros(len(self.scene),
                                    num_sh_coeffs(self.scene.sh_degree))
        g_start = np.zeros(6)
        g_end = np.zeros(6)
        loss = 0.0
        for t, prep, latent, adj in zip(self.times, self.preps, self.latents,
                                        adjoints):
            adj = np.asarray(adj, dtype=float)
            if not np.all(np.isfinite(adj)):
                raise ValueError("non-finite adjoint image")
            loss += float(np.sum(adj * latent.data))
            if adj.any():
                dtwist = _backward_pose(prep, adj, grad)
                s = (t - self.traj.t_start) / self.traj.duration
                j_start, j_end = interpolation_endpoint_jacobians(self.traj, s)
                g_start += j_start.T @ dtwist
                g_end += j_end.T @ dtwist
        grad.twist_start = Twist.from_array(g_start)
        grad.twist_end = Twist.from_array(g_end)
        grad.loss = loss
        return grad


def render_latents_with_grad(
        scene: Scene, traj: ExposureTrajectory, K: CameraIntrinsics,
        adjoints: list[np.ndarray]) -> tuple[list[RadianceImage], GradientBuffer]:
    """Latent renders plus partials of sum_i <adjoint_i, C_i> with respect to
    all Gaussian parameters and the two endpoint twists."""
    ctx = LatentRenderContext(scene, traj, K, len(adjoints))
    return ctx.latents, ctx.backward(adjoints)


def render_with_grad(scene: Scene, traj: ExposureTrajectory,
                     K: CameraIntrinsics, adjoint: np.ndarray,
                     n: int = 5) -> tuple[RadianceImage, GradientBuffer]:
    """Blurred render plus partials of <adjoint, blurred> for every Gaussian
    parameter and both endpoint twists."""
    adjoint = np.asarray(adjoint, dtype=float)
    if not np.all(np.isfinite(adjoint)):
        raise ValueError("non-finite adjoint image")
    latents, grad = render_latents_with_grad(scene, traj, K,
                                             [adjoint / n] * n)
    blurred = RadianceImage(np.mean([im.data for im in latents], axis=0))
    return blurred, grad
