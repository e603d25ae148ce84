"""Rotation and quaternion algebra shared by every other module.

Conventions (used everywhere in the package):

* Quaternions are numpy arrays ``[w, x, y, z]``, Hamilton product,
  right-handed.  A body orientation ``q`` maps body-frame vectors into the
  world frame: ``p_world = R(q) @ p_body + t``.
* Canonical form has ``w >= 0``.
* Local rotation perturbations are right-multiplicative:
  ``q <- q ⊗ Exp(dtheta)``, i.e. ``R <- R @ exp([dtheta]x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

_SMALL_ANGLE = 1e-8
_SLERP_LINEAR_THRESHOLD = 1.0 - 1e-8


class TimingError(ValueError):
    """Raised when an interpolation interval is empty or reversed."""


def _norm(v) -> float:
    # scalar 2-norm without the overhead of np.linalg.norm on tiny vectors
    return math.sqrt(float(np.dot(v, v)))


def skew(v) -> np.ndarray:
    """Return the 3x3 matrix ``[v]x`` with ``skew(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = _norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    q = q / n
    return -q if q[0] < 0.0 else q


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    # terms grouped in pairs that cancel exactly for conj(q) ⊗ q
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        (aw * bx + ax * bw) + (ay * bz - az * by),
        (aw * by + ay * bw) + (az * bx - ax * bz),
        (aw * bz + az * bw) + (ax * by - ay * bx),
    ])


def quat_left(q) -> np.ndarray:
    """Matrix ``L(q)`` such that ``L(q) @ p == q ⊗ p``."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right(q) -> np.ndarray:
    """Matrix ``R(q)`` such that ``R(q) @ p == p ⊗ q``."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_exp(theta) -> np.ndarray:
    """Unit quaternion of the rotation vector ``theta`` (angle-axis)."""
    theta = np.asarray(theta, dtype=float)
    angle = _norm(theta)
    if angle < _SMALL_ANGLE:
        return quat_normalize(np.concatenate(([1.0], 0.5 * theta)))
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) / angle * theta))


def quat_log(q) -> np.ndarray:
    """Rotation vector of ``q``, taking the short way round (angle <= pi)."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    v = q[1:]
    s = _norm(v)
    if s < _SMALL_ANGLE:
        return 2.0 * v / q[0]
    return 2.0 * np.arctan2(s, q[0]) / s * v


def so3_exp(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    angle = _norm(theta)
    K = skew(theta)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(angle) / angle * K
            + (1.0 - np.cos(angle)) / angle**2 * K @ K)


def so3_log(R) -> np.ndarray:
    return quat_log(rot_to_quat(R))


def right_jacobian(theta) -> np.ndarray:
    """SO(3) right Jacobian: ``Exp(a + b) ~= Exp(a) Exp(Jr(a) b)``."""
    theta = np.asarray(theta, dtype=float)
    angle = _norm(theta)
    K = skew(theta)
    if angle < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1.0 - np.cos(angle)) / angle**2 * K
            + (angle - np.sin(angle)) / angle**3 * K @ K)


def right_jacobian_inv(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    angle = _norm(theta)
    K = skew(theta)
    if angle < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / angle**2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + coef * K @ K


def left_jacobian_inv(theta) -> np.ndarray:
    return right_jacobian_inv(-np.asarray(theta, dtype=float))


def slerp(q0, q1, alpha: float) -> np.ndarray:
    """Spherical linear interpolation along the shortest arc.

    Falls back to normalized linear interpolation when the inputs are
    nearly identical.
    """
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > _SLERP_LINEAR_THRESHOLD:
        return quat_normalize((1.0 - alpha) * q0 + alpha * q1)
    theta = np.arccos(min(dot, 1.0))
    s = np.sin(theta)
    out = (np.sin((1.0 - alpha) * theta) / s) * q0 + (np.sin(alpha * theta) / s) * q1
    return quat_normalize(out)


def rotate(q, v) -> np.ndarray:
    return quat_to_rot(q) @ np.asarray(v, dtype=float)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    return quat_normalize(rng.normal(size=4))


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R(rotation) @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.rotation, other.rotation),
                    self.R @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(qi, -(quat_to_rot(qi) @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform an ``(N, 3)`` array (or a single 3-vector)."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class Extrinsics:
    """Constant LiDAR-to-IMU transform, fixed once configured."""

    lidar_to_imu: Pose = field(default_factory=Pose)


@dataclass(frozen=True)
class State:
    """Pose, velocity and IMU biases of the body at one instant."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("translation", "velocity", "accel_bias", "gyro_bias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        if not np.isfinite(self.timestamp):
            raise ValueError("state timestamp must be finite")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.rotation)

    @property
    def pose(self) -> Pose:
        return Pose(self.rotation, self.translation)

    def replace(self, **changes) -> "State":
        return replace(self, **changes)

    def retract(self, delta) -> "State":
        """Apply a 15-dim increment ordered (dt, dtheta, dv, dba, dbw)."""
        delta = np.asarray(delta, dtype=float)
        return State(
            translation=self.translation + delta[0:3],
            rotation=quat_mul(self.rotation, quat_exp(delta[3:6])),
            velocity=self.velocity + delta[6:9],
            accel_bias=self.accel_bias + delta[9:12],
            gyro_bias=self.gyro_bias + delta[12:15],
            timestamp=self.timestamp,
        )


def interpolate_state(xb: State, xe: State, t: float) -> State:
    """State at ``t`` between two bracketing states.

    Linear in translation, velocity and biases; slerp for the rotation.
    """
    span = xe.timestamp - xb.timestamp
    if not span > 0.0:
        raise TimingError(f"degenerate interpolation interval [{xb.timestamp}, {xe.timestamp}]")
    a = (t - xb.timestamp) / span
    if a == 0.0:
        return xb.replace(timestamp=t)
    if a == 1.0:
        return xe.replace(timestamp=t)
    return State(
        translation=(1.0 - a) * xb.translation + a * xe.translation,
        rotation=slerp(xb.rotation, xe.rotation, a),
        velocity=(1.0 - a) * xb.velocity + a * xe.velocity,
        accel_bias=(1.0 - a) * xb.accel_bias + a * xe.accel_bias,
        gyro_bias=(1.0 - a) * xb.gyro_bias + a * xe.gyro_bias,
        timestamp=t,
    )


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def so3_exp_batch(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula over an ``(N, 3)`` array of rotation vectors."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)[..., None, None]
    K = skew_batch(theta)
    K2 = K @ K
    small = angle < 1e-5
    a2 = np.where(small, 1.0, angle**2)
    safe = np.where(small, 1.0, angle)
    c1 = np.where(small, 1.0 - angle**2 / 6.0, np.sin(safe) / safe)
    c2 = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / a2)
    return np.eye(3) + c1 * K + c2 * K2


def right_jacobian_batch(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)[..., None, None]
    K = skew_batch(theta)
    K2 = K @ K
    small = angle < 1e-4
    safe = np.where(small, 1.0, angle)
    c1 = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c2 = np.where(small, 1.0 / 6.0 - angle**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return np.eye(3) - c1 * K + c2 * K2


def _along_axis(phi, a):
    """``[phi]x``, ``[phi]x^2`` and the angles ``|a| |phi|`` for scaled copies ``a * phi``."""
    phi = np.asarray(phi, dtype=float)
    a = np.asarray(a, dtype=float)
    K = skew(phi)
    return K, K @ K, np.abs(a) * _norm(phi)


def so3_exp_along(phi, a) -> np.ndarray:
    """``Exp(a_i * phi)`` for a single axis ``phi`` and scales ``a`` of shape (N,).

    Same result as ``so3_exp_batch(a[:, None] * phi)``; the shared axis
    reduces the work to per-point scalars.
    """
    K, K2, th = _along_axis(phi, a)
    a = np.asarray(a, dtype=float)
    c1 = np.sinc(th / np.pi) * a
    c2 = 0.5 * np.sinc(th / (2.0 * np.pi)) ** 2 * a * a
    return np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * K2


def right_jacobian_along(phi, a) -> np.ndarray:
    """``Jr(a_i * phi)`` for a single axis ``phi`` and scales ``a`` of shape (N,)."""
    K, K2, th = _along_axis(phi, a)
    a = np.asarray(a, dtype=float)
    c1 = 0.5 * np.sinc(th / (2.0 * np.pi)) ** 2 * a
    small = th < 1e-4
    safe = np.where(small, 1.0, th)
    c2 = np.where(small, 1.0 / 6.0 - th**2 / 120.0, (safe - np.sin(safe)) / safe**3) * a * a
    return np.eye(3) - c1[:, None, None] * K + c2[:, None, None] * K2


def quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R
