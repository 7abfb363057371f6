"""Rigid-body math: SE(3) poses, unit dual quaternions and the se(3) exp/log maps.

Conventions
-----------
* Rotations are stored as 3x3 matrices; quaternion forms are computed on demand.
* Quaternions are ``(w, x, y, z)`` and canonicalised so that ``w >= 0`` (ties at
  ``w == 0`` resolved by making the first non-zero component positive).
* The dual part of a dual quaternion is ``0.5 * (0, t) (x) q_real``.
* Twist vectors are laid out ``(translational[3], rotational[3])``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NearSingularError, NonUnitError

ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-6


def hat(v):
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def project_to_rotation(m):
    """Nearest rotation matrix (Frobenius norm) to ``m``."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid motion ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL or np.linalg.det(r) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m, reorthonormalize=False):
        m = np.asarray(m, dtype=float)
        r = m[:3, :3]
        if reorthonormalize:
            r = project_to_rotation(r)
        return cls(r, m[:3, 3])

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        return pose_inverse(self)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return pose_compose(self, other)
        return NotImplemented

    def transform_points(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotation_angle(self):
        return rotation_angle(self.rotation)

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def __repr__(self):
        return (
            f"Pose(rotation={np.round(self.rotation, 6).tolist()}, "
            f"translation={np.round(self.translation, 6).tolist()})"
        )


def pose_compose(a, b):
    """Apply ``b`` then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p):
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def relative_pose(a, b):
    """``a^-1 * b``: pose of ``b`` expressed in the frame of ``a``."""
    return pose_compose(pose_inverse(a), b)


def rotation_angle(r):
    """Rotation angle in [0, pi] computed robustly from trace and skew part."""
    s = np.linalg.norm(vee(r - r.T)) / 2.0
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


# --------------------------------------------------------------------- quaternions


def canonical_quaternion(q):
    """Sign-fix a quaternion so that ``w >= 0`` (first non-zero positive on ties)."""
    q = np.asarray(q, dtype=float)
    for value in q:
        if value > 0.0:
            return q.copy()
        if value < 0.0:
            return -q
    return q.copy()


def quaternion_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quaternion_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def rotation_to_quaternion(r):
    """Unit quaternion (canonical sign) from a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    diag = np.diag(r)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return canonical_quaternion(q / np.linalg.norm(q))


def quaternion_to_rotation(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ----------------------------------------------------------------- dual quaternions


@dataclass(frozen=True, eq=False)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.array(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.array(self.dual, dtype=float).reshape(4))

    def as_vector(self):
        """The 8 numbers ``(q0..q3, qe0..qe3)``."""
        return np.concatenate([self.real, self.dual])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:4], v[4:])

    def __mul__(self, other):
        return dual_quaternion_multiply(self, other)

    def canonical(self):
        if np.array_equal(canonical_quaternion(self.real), self.real):
            return self
        return DualQuaternion(-self.real, -self.dual)


def dual_quaternion_multiply(a, b):
    return DualQuaternion(
        quaternion_multiply(a.real, b.real),
        quaternion_multiply(a.real, b.dual) + quaternion_multiply(a.dual, b.real),
    )


def pose_to_dual_quaternion(p):
    real = rotation_to_quaternion(p.rotation)
    t_quat = np.concatenate([[0.0], p.translation])
    dual = 0.5 * quaternion_multiply(t_quat, real)
    return DualQuaternion(real, dual)


def dual_quaternion_to_pose(dq, tol=1e-6):
    real = np.asarray(dq.real, dtype=float)
    dual = np.asarray(dq.dual, dtype=float)
    norm = np.linalg.norm(real)
    if not np.isfinite(norm) or abs(norm - 1.0) > tol:
        raise NonUnitError(f"real part has norm {norm}, expected 1")
    real = real / norm
    dual = dual / norm
    dual = dual - np.dot(real, dual) * real
    t = 2.0 * quaternion_multiply(dual, quaternion_conjugate(real))[1:]
    return Pose(project_to_rotation(quaternion_to_rotation(real)), t)


# ------------------------------------------------------------------------ se(3)


@dataclass(frozen=True, eq=False)
class Twist:
    rotational: np.ndarray
    translational: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotational", np.array(self.rotational, dtype=float).reshape(3))
        object.__setattr__(
            self, "translational", np.array(self.translational, dtype=float).reshape(3)
        )

    def as_vector(self):
        return np.concatenate([self.translational, self.rotational])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(rotational=v[3:6], translational=v[:3])


def _so3_coefficients(theta):
    """Return ``sin(t)/t``, ``(1-cos t)/t^2``, ``(t - sin t)/t^3`` with series near 0."""
    if theta < 1e-4:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    return a, b, c


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _so3_coefficients(theta)
    k = hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r, singular_tol=_SMALL_ANGLE):
    theta = rotation_angle(r)
    if theta > np.pi - singular_tol:
        raise NearSingularError(f"rotation angle {theta} too close to pi")
    skew = vee(r - r.T) / 2.0
    if theta < 1e-4:
        # sin(t)/t series keeps the ratio accurate
        return skew * (1.0 + theta**2 / 6.0 + 7.0 * theta**4 / 360.0)
    if theta < 2.5:
        return skew * theta / np.sin(theta)
    # large angles: axis from the symmetric part, sign from the skew part
    sym = (r + r.T) / 2.0 - np.cos(theta) * np.eye(3)
    aat = sym / (1.0 - np.cos(theta))
    i = int(np.argmax(np.diag(aat)))
    axis = aat[:, i] / np.sqrt(aat[i, i])
    if np.dot(axis, skew) < 0:
        axis = -axis
    return axis * theta


def se3_exp(tw):
    """Exponential map; accepts a :class:`Twist` or a 6-vector (trans, rot)."""
    if not isinstance(tw, Twist):
        tw = Twist.from_vector(tw)
    omega = tw.rotational
    theta = float(np.linalg.norm(omega))
    a, b, c = _so3_coefficients(theta)
    k = hat(omega)
    k2 = k @ k
    r = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return Pose(project_to_rotation(r) if theta > 0 else r, v @ tw.translational)


def se3_log(p, singular_tol=_SMALL_ANGLE):
    omega = so3_log(p.rotation, singular_tol=singular_tol)
    theta = float(np.linalg.norm(omega))
    k = hat(omega)
    if theta < 1e-4:
        coef = 1.0 / 12.0 + theta**2 / 720.0
    else:
        a, b, _ = _so3_coefficients(theta)
        coef = (1.0 - a / (2.0 * b)) / theta**2
    v_inv = np.eye(3) - 0.5 * k + coef * (k @ k)
    return Twist(rotational=omega, translational=v_inv @ p.translation)


def random_pose(rng, max_angle=np.pi, max_translation=10.0):
    """Random pose with uniformly drawn axis and angle below ``max_angle``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return Pose(so3_exp(axis * angle), t)
