"""Rigid-body arithmetic on SE(3).

Poses store a unit quaternion ``(qx, qy, qz, qw)`` (Hamilton convention) and a
translation in meters. Tangent vectors (twists) are plain ``(6,)`` arrays
ordered ``(rho, phi)``: translational part first, rotational part second.

Every function has a batched twin prefixed ``batch_`` that operates on stacks
of quaternions ``(..., 4)`` and translations ``(..., 3)``; the optimizer uses
those to evaluate all edges of a graph at once.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

# Rotation angle below which closed-form coefficients switch to Taylor series.
SMALL_ANGLE = 1e-6
# Rotation angle above which the log map applies the deterministic sign rule.
NEAR_PI = np.pi - 1e-6
# Series switchover for the SE(3) Jacobian coupling block only.
Q_SERIES_ANGLE = 1e-2

_COS_NEAR_PI_HALF = np.cos(NEAR_PI / 2.0)


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (batched over leading axes)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


# ---------------------------------------------------------------- quaternions


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = (a[..., i] for i in range(4))
    bx, by, bz, bw = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., :3] *= -1.0
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    u = q[..., :3]
    w = q[..., 3:4]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


_UNIT_SLACK = 8 * np.finfo(float).eps


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = (q[..., i] for i in range(4))
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method for a single 3x3 rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, diag[0], diag[1], diag[2]]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(np.array(q))


# ------------------------------------------------------------------- SO(3)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation vector -> unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta
    coeff = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * safe) / safe)
    w = np.cos(0.5 * theta)
    return np.concatenate([coeff * phi, w], axis=-1)


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    """Sign per quaternion so that w >= 0, or, near angle pi, so that the
    first nonzero vector component is nonnegative."""
    w = q[..., 3]
    near_pi = np.abs(w) <= _COS_NEAR_PI_HALF
    v = q[..., :3]
    nonzero = v != 0.0
    first = np.argmax(nonzero, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
    sign_pi = np.where(lead < 0.0, -1.0, 1.0)
    sign_w = np.where(w < 0.0, -1.0, 1.0)
    return np.where(near_pi, sign_pi, sign_w)


def so3_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> rotation vector, angle in [0, pi] (pi + 1e-6 at the tie)."""
    q = np.asarray(q, dtype=float)
    q = q * _canonical_sign(q)[..., None]
    v = q[..., :3]
    w = q[..., 3:4]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = 2.0 * n < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    general = 2.0 * np.arctan2(n, w) / safe_n
    taylor = 2.0 / safe_w * (1.0 - n**2 / (3.0 * safe_w**2))
    return np.where(small, taylor, general) * v


def _so3_coefficients(theta: np.ndarray):
    """(1-cos)/t^2, (t-sin)/t^3 and the inverse-Jacobian coefficient."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / t**2)
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / t**3)
    c = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        1.0 / t**2 - np.cos(0.5 * t) / (2.0 * t * np.sin(0.5 * t)),
    )
    return a, b, c


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _so3_coefficients(theta)
    P = hat(phi)
    return np.eye(3) + a[..., None, None] * P + b[..., None, None] * (P @ P)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, _, c = _so3_coefficients(theta)
    P = hat(phi)
    return np.eye(3) - 0.5 * P + c[..., None, None] * (P @ P)


def _se3_q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian (Barfoot's Q)."""
    theta = np.linalg.norm(phi, axis=-1)
    # These coefficients lose all precision to cancellation well above
    # SMALL_ANGLE, so their series branch starts at Q_SERIES_ANGLE.
    small = theta < Q_SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    t4 = t2 * t2
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0, (t - np.sin(t)) / t**3)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
        (t * t + 2.0 * np.cos(t) - 2.0) / (2.0 * t**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        (2.0 * t - 3.0 * np.sin(t) + t * np.cos(t)) / (2.0 * t**5),
    )
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rh
        + c1[..., None, None] * (PR + RP + PRP)
        + c2[..., None, None] * (PP @ Rh + RP @ P - 3.0 * PRP)
        + c3[..., None, None] * (PRP @ P + PP @ RP)
    )


# ------------------------------------------------------------------- SE(3)


def batch_compose(qa, ta, qb, tb):
    q = quat_normalize(quat_multiply(qa, qb))
    return q, ta + quat_rotate(qa, tb)


def batch_inverse(q, t):
    qi = quat_conjugate(q)
    return qi, -quat_rotate(qi, t)


def batch_exp(xi: np.ndarray):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    q = so3_exp(phi)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    return q, t


def batch_log(q, t) -> np.ndarray:
    phi = so3_log(q)
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), t)
    return np.concatenate([rho, phi], axis=-1)


def batch_adjoint(q, t) -> np.ndarray:
    R = quat_to_matrix(q)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = hat(t) @ R
    return out


def batch_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian of SE(3): d log(exp(d) T) / d d at d = 0."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_q_matrix(rho, phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jinv
    out[..., 3:, 3:] = Jinv
    out[..., :3, 3:] = -Jinv @ Q @ Jinv
    return out


class Pose:
    """Immutable rigid transform. ``a @ b`` composes, ``~a`` inverts."""

    __slots__ = ("quat", "translation")

    def __init__(self, quat: Iterable[float] = (0.0, 0.0, 0.0, 1.0),
                 translation: Iterable[float] = (0.0, 0.0, 0.0)) -> None:
        q = np.array(quat, dtype=float).reshape(4)
        # Already-unit input is kept as is so parse/serialize cycles are exact.
        if abs(np.linalg.norm(q) - 1.0) > _UNIT_SLACK:
            q = quat_normalize(q)
        t = np.array(translation, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float = 0.0, yaw: float = 0.0) -> Pose:
        return cls((0.0, 0.0, np.sin(yaw / 2.0), np.cos(yaw / 2.0)), (x, y, z))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __invert__(self) -> Pose:
        return inverse(self)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.translation + quat_rotate(self.quat, np.asarray(p, dtype=float))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(quat=({q}), translation=({t}))"

    def __reduce__(self):
        return (Pose, (tuple(self.quat), tuple(self.translation)))


def compose(a: Pose, b: Pose) -> Pose:
    q, t = batch_compose(a.quat, a.translation, b.quat, b.translation)
    return Pose(q, t)


def inverse(a: Pose) -> Pose:
    q, t = batch_inverse(a.quat, a.translation)
    return Pose(q, t)


def exp(xi: np.ndarray) -> Pose:
    q, t = batch_exp(xi)
    return Pose(q, t)


def log(a: Pose) -> np.ndarray:
    return batch_log(a.quat, a.translation)


def adjoint(a: Pose) -> np.ndarray:
    return batch_adjoint(a.quat, a.translation)


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return batch_left_jacobian_inv(xi)


def rotation_angle(a: Pose) -> float:
    return float(np.linalg.norm(so3_log(a.quat)))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle, translation norm) of ``a^-1 b``."""
    d = inverse(a) @ b
    return rotation_angle(d), float(np.linalg.norm(d.translation))


def stack_poses(poses: Iterable[Pose]) -> tuple[np.ndarray, np.ndarray]:
    poses = list(poses)
    if not poses:
        return np.zeros((0, 4)), np.zeros((0, 3))
    return np.stack([p.quat for p in poses]), np.stack([p.translation for p in poses])
