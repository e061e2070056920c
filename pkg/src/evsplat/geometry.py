"""Rigid-body poses on SE(3) and intra-exposure trajectory interpolation.

Conventions, stated once and enforced by the test suite:
  * quaternions are scalar-first (w, x, y, z) and kept unit-norm,
  * a Pose maps world coordinates to camera coordinates, x_cam = R x_world + t,
  * a Twist stacks the rotational part first: xi = (wx, wy, wz, vx, vy, vz).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# below this rotation angle (radians) the closed forms switch to Taylor branches
SMALL_ANGLE = 1e-6


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(np.dot(q, q)))
    if n == 0.0:
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the unit quaternion with w >= 0."""
    t = np.trace(m)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ v


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# SO(3) exp/log on quaternions
# ---------------------------------------------------------------------------

def so3_exp_quat(omega: np.ndarray) -> np.ndarray:
    angle = math.sqrt(float(np.dot(omega, omega)))
    if angle < SMALL_ANGLE:
        # sin(a/2)/a = 1/2 - a^2/48 + O(a^4)
        half_sinc = 0.5 - angle * angle / 48.0
        w = 1.0 - angle * angle / 8.0
    else:
        half_sinc = math.sin(0.5 * angle) / angle
        w = math.cos(0.5 * angle)
    return quat_normalize(np.array([w, *(half_sinc * omega)]))


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    w, xyz = q[0], q[1:]
    if w < 0.0:  # log of the shorter arc
        w, xyz = -w, -xyz
    vn = math.sqrt(float(np.dot(xyz, xyz)))
    angle = 2.0 * math.atan2(vn, w)
    if angle >= math.pi - 1e-9:
        raise ValueError("rotation angle at pi: se3_log is degenerate")
    if vn < 0.5 * SMALL_ANGLE:
        scale = 2.0 / w  # angle/vn for small angles, with atan2(vn,w) ~ vn/w
        return scale * xyz
    return (angle / vn) * xyz


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: x_cam = R(q) x_world + t."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=float))
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        return Pose(quat_from_matrix(np.asarray(m)[:3, :3]), np.asarray(m)[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self o other)(x) = self(other(x))."""
        return Pose(quat_multiply(self.q, other.q),
                    quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.q)
        return Pose(qinv, -quat_rotate(qinv, self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation_matrix().T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -(self.rotation_matrix().T @ self.t)

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @staticmethod
    def from_json(d: dict) -> "Pose":
        return Pose(np.array(d["q"], dtype=float), np.array(d["t"], dtype=float))


@dataclass(frozen=True)
class Twist:
    """se(3) tangent vector, rotation part first."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).copy())
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).copy())

    @staticmethod
    def from_array(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return Twist(xi[:3], xi[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class ExposureTrajectory:
    """Camera path over one exposure: linear interpolation in se(3) between
    the endpoint poses, over the window [t_start, t_end]."""

    pose_start: Pose
    pose_end: Pose
    t_start: float
    t_end: float

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError(f"exposure window empty: [{self.t_start}, {self.t_end}]")

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def mid_time(self) -> float:
        return 0.5 * (self.t_start + self.t_end)

    def to_json(self) -> dict:
        return {"pose_start": self.pose_start.to_json(),
                "pose_end": self.pose_end.to_json(),
                "t_start": self.t_start, "t_end": self.t_end}

    @staticmethod
    def from_json(d: dict) -> "ExposureTrajectory":
        return ExposureTrajectory(Pose.from_json(d["pose_start"]),
                                  Pose.from_json(d["pose_end"]),
                                  float(d["t_start"]), float(d["t_end"]))


# ---------------------------------------------------------------------------
# exp / log on SE(3)
# ---------------------------------------------------------------------------

def _so3_V(omega: np.ndarray) -> np.ndarray:
    """V(w) with exp([w]x) = I + ... ; translation part of SE(3) exp is V v."""
    angle2 = float(np.dot(omega, omega))
    K = skew(omega)
    if angle2 < SMALL_ANGLE * SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    angle = math.sqrt(angle2)
    c1 = (1.0 - math.cos(angle)) / angle2
    c2 = (angle - math.sin(angle)) / (angle2 * angle)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def _so3_V_inv(omega: np.ndarray) -> np.ndarray:
    angle2 = float(np.dot(omega, omega))
    K = skew(omega)
    if angle2 < SMALL_ANGLE * SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    angle = math.sqrt(angle2)
    c = (1.0 - 0.5 * angle * math.sin(angle) / (1.0 - math.cos(angle))) / angle2
    return np.eye(3) - 0.5 * K + c * (K @ K)


def se3_exp(xi: Twist) -> Pose:
    """Closed-form exponential map; Rodrigues rotation plus V-matrix translation."""
    return Pose(so3_exp_quat(xi.omega), _so3_V(xi.omega) @ xi.v)


def se3_log(p: Pose) -> Twist:
    """Inverse of se3_exp; rejects rotations at angle pi."""
    omega = so3_log_quat(p.q)
    return Twist(omega, _so3_V_inv(omega) @ p.t)


def pose_adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint mapping twists (rotation-first) through the pose:
    Ad_P xi = vee(P hat(xi) P^-1)."""
    R = p.rotation_matrix()
    ad = np.zeros((6, 6))
    ad[:3, :3] = R
    ad[3:, :3] = skew(p.t) @ R
    ad[3:, 3:] = R
    return ad


def se3_left_jacobian(xi: Twist, terms: int = 30) -> np.ndarray:
    """Left Jacobian J_l with exp(xi + d) ~ exp(J_l d) exp(xi), as a truncated
    series in ad_xi (converges factorially for the rotation angles in use)."""
    ad = np.zeros((6, 6))
    K = skew(xi.omega)
    ad[:3, :3] = K
    ad[3:, 3:] = K
    ad[3:, :3] = skew(xi.v)
    J = np.eye(6)
    term = np.eye(6)
    for k in range(1, terms):
        term = term @ ad / (k + 1.0)
        J += term
    return J


# ---------------------------------------------------------------------------
# trajectory sampling
# ---------------------------------------------------------------------------

def interpolate_pose(traj: ExposureTrajectory, t: float) -> Pose:
    """Pose at time t: P(t) = P_start o exp(s * log(P_start^-1 o P_end))."""
    if t < traj.t_start or t > traj.t_end:
        raise ValueError(f"time {t} outside exposure window "
                         f"[{traj.t_start}, {traj.t_end}]")
    s = (t - traj.t_start) / traj.duration
    xi = se3_log(traj.pose_start.inverse().compose(traj.pose_end))
    return traj.pose_start.compose(se3_exp(Twist(s * xi.omega, s * xi.v)))


def latent_timestamps(traj: ExposureTrajectory, n: int) -> list[float]:
    """n equally spaced times across the exposure, endpoints included; n must
    be odd so the mid-exposure time is always one of the samples."""
    if n < 1 or n % 2 == 0:
        raise ValueError(f"latent sample count must be odd and >= 1, got {n}")
    if n == 1:
        return [traj.mid_time]
    times = [traj.t_start + traj.duration * i / (n - 1) for i in range(n)]
    times[(n - 1) // 2] = traj.mid_time  # exact midpoint, no roundoff drift
    return times


def interpolation_endpoint_jacobians(
        traj: ExposureTrajectory, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the left-perturbation of P(s) with respect to left
    perturbations of the endpoint poses.

    With P_start <- exp(eps_s) P_start (resp. end) and P(s; eps) written as
    exp(delta(eps)) P(s), returns (d delta/d eps_start, d delta/d eps_end),
    both 6x6 and exact to first order:

        d delta/d eps_end   = s * Ad_A J_l(s xi) J_l(xi)^-1 Ad_A^-1
        d delta/d eps_start = I - d delta/d eps_end

    where A = P_start and xi = log(P_start^-1 P_end).
    """
    A = traj.pose_start
    xi = se3_log(A.inverse().compose(traj.pose_end))
    ad_A = pose_adjoint(A)
    Jl_s = se3_left_jacobian(Twist(s * xi.omega, s * xi.v))
    Jl = se3_left_jacobian(xi)
    M = s * ad_A @ Jl_s @ np.linalg.solve(Jl, np.linalg.inv(ad_A))
    return np.eye(6) - M, M


def rotation_geodesic_angle(a: Pose, b: Pose) -> float:
    """Angle (radians) of the relative rotation between two poses."""
    if np.array_equal(a.q, b.q):
        return 0.0
    dq = quat_multiply(quat_conjugate(a.q), b.q)
    # atan2 form stays exact near zero where acos loses precision
    return 2.0 * math.atan2(math.sqrt(float(np.dot(dq[1:], dq[1:]))),
                            abs(float(dq[0])))
