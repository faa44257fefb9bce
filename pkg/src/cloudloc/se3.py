"""SO(3)/SE(3) primitives shared by every other module.

Conventions, fixed once and used everywhere:

* Quaternions are Hamilton, scalar first: ``q = (w, x, y, z)``, unit norm.
* A :class:`Pose` ``(R, t)`` maps child-frame coordinates into the parent
  frame: ``p_parent = R @ p_child + t``.  ``T^A_B`` in the docs means "pose
  of frame B expressed in frame A".
* Tangent vectors are 6-vectors ordered ``(rotation, translation)``.
* The exp/log chart is the SO(3) x R^3 product chart::

      exp((phi, rho)) = (Exp_SO3(phi), rho)
      log(T)          = (Log_SO3(R), t)

  i.e. translation is charted directly instead of through the SE(3)
  V-matrix.  ``exp`` and ``log`` are exact inverses of each other for
  rotation angles below pi.
* The optimizer retraction is ``T (+) delta = T * exp(delta)``: rotation is
  right-multiplied, translation increments live in the body frame
  (``t <- t + R @ delta_rho``).  All analytic Jacobians in
  :mod:`cloudloc.factors` are written against this retraction.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
    if abs(n2 - 1.0) < 1e-14:  # already unit: keep the exact bytes
        return q
    return q / np.sqrt(n2)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Exponential map R^3 -> unit quaternion."""
    theta = np.linalg.norm(phi)
    if theta < _SMALL_ANGLE:
        # sin(t/2)/t ~ 1/2 - t^2/48
        s = 0.5 - theta * theta / 48.0
        return quat_normalize(np.array([1.0 - theta * theta / 8.0, *(s * phi)]))
    half = 0.5 * theta
    s = np.sin(half) / theta
    return np.array([np.cos(half), s * phi[0], s * phi[1], s * phi[2]])


def so3_log(q: np.ndarray) -> np.ndarray:
    """Logarithm map unit quaternion -> R^3, angle in [0, pi]."""
    w, v = q[0], q[1:]
    if w < 0.0:
        w, v = -w, -v
    n = np.linalg.norm(v)
    if n < _SMALL_ANGLE:
        # 2/w * (1 - n^2/(3 w^2)) ~ 2 for unit quaternions near identity
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    theta = 2.0 * np.arctan2(n, w)
    return v * (theta / n)


def so3_exp_matrix(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula."""
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log_matrix(R: np.ndarray) -> np.ndarray:
    return so3_log(quat_from_matrix(R))


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Jr such that Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * W + b * (W @ W)


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 12.0
    c = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * W + c * (W @ W)


class Pose:
    """Rigid transform on SE(3), stored as unit quaternion + translation.

    Instances are treated as immutable; every constructor normalizes the
    quaternion so the unit-norm invariant survives long compose chains.
    """

    __slots__ = ("q", "t", "_R")

    def __init__(self, q: np.ndarray, t: np.ndarray):
        self.q = quat_normalize(np.asarray(q, dtype=float).copy())
        self.t = np.asarray(t, dtype=float).copy()
        self._R = None

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(quat_from_matrix(np.asarray(R, dtype=float)), t)

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        """Product-chart exponential; xi = (phi, rho)."""
        xi = np.asarray(xi, dtype=float)
        return cls(so3_exp(xi[:3]), xi[3:])

    @property
    def R(self) -> np.ndarray:
        if self._R is None:
            self._R = quat_to_matrix(self.q)
        return self._R

    def log(self) -> np.ndarray:
        """Product-chart logarithm, ordered (rotation, translation)."""
        return np.concatenate([so3_log(self.q), self.t])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.q)
        return Pose(qc, -(quat_to_matrix(qc) @ self.t))

    def act(self, p: np.ndarray) -> np.ndarray:
        """Apply to a point (3,) or an array of points (N, 3)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def retract(self, delta: np.ndarray) -> "Pose":
        """T * exp(delta): the optimizer's boxplus."""
        return self.compose(Pose.exp(delta))

    def local(self, other: "Pose") -> np.ndarray:
        """log(self^-1 * other): boxminus, the 6-vector from self to other."""
        return self.inverse().compose(other).log()

    def rotation_angle_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(so3_log(quat_multiply(quat_conjugate(self.q), other.q))))

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.t - other.t))

    def copy(self) -> "Pose":
        return Pose(self.q, self.t)

    def approx_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return float(np.linalg.norm(self.local(other))) <= tol

    def __repr__(self) -> str:
        return f"Pose(q={self.q!r}, t={self.t!r})"


def log(pose: Pose) -> np.ndarray:
    return pose.log()


def exp(xi: np.ndarray) -> Pose:
    return Pose.exp(xi)


def yaw_pose(yaw: float, t: np.ndarray) -> Pose:
    """Gravity-aligned pose: rotation about +z only."""
    half = 0.5 * yaw
    return Pose(np.array([np.cos(half), 0.0, 0.0, np.sin(half)]), t)
