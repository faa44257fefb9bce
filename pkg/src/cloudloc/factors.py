"""Residuals, analytic Jacobians, and factor objects for the solvers.

All pose Jacobians are written against the right retraction
``T (+) d = T * exp(d)`` with tangent order (rotation, translation); see
`se3`.  Every analytic Jacobian here is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .camera import PinholeCamera
from .errors import BehindCamera
from .preintegration import PreintegratedImu
from .se3 import (
    Pose,
    quat_to_matrix,
    skew,
    so3_exp_matrix,
    so3_log_matrix,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

# Huber thresholds on the squared Mahalanobis norm: chi-square 95% quantiles.
HUBER_DELTA_2DOF = float(chi2.ppf(0.95, 2))  # 5.991...
HUBER_DELTA_3DOF = float(chi2.ppf(0.95, 3))  # 7.815...
HUBER_DELTA_6DOF = float(chi2.ppf(0.95, 6))
HUBER_DELTA_9DOF = float(chi2.ppf(0.95, 9))


def huber(s: float, delta: float | None) -> tuple[float, float]:
    """Huber kernel on the squared Mahalanobis error s = r^T W r.

    Returns (rho(s), weight) with weight = d rho / d s; inside the
    quadratic region rho(s) = s and the weight is 1.
    """
    if delta is None or s <= delta:
        return s, 1.0
    sq = np.sqrt(delta * s)
    return 2.0 * sq - delta, float(np.sqrt(delta / s))


@dataclass
class Block:
    """One weighted residual block: r, info W, jacobians per variable key."""

    residual: np.ndarray
    info: np.ndarray
    jacobians: dict
    robust: float | None

    def squared_error(self) -> float:
        return float(self.residual @ self.info @ self.residual)


# ---------------------------------------------------------------------------
# residual cores


def reprojection_residual(
    pose_wb: Pose,
    point_w: np.ndarray,
    pixel: np.ndarray,
    camera: PinholeCamera,
    t_cb: Pose,
):
    """Pixel residual of one observation plus Jacobians.

    Returns (r (2,), J_pose (2,6), J_point (2,3)); raises BehindCamera when
    the point falls at or behind the camera's minimum depth.
    """
    R_wb = pose_wb.R
    p_b = R_wb.T @ (point_w - pose_wb.t)
    p_c = t_cb.R @ p_b + t_cb.t
    uv = camera.project(p_c)  # raises BehindCamera
    duv = camera.project_jacobian(p_c)
    d_cam = duv @ t_cb.R
    j_pose = np.empty((2, 6))
    j_pose[:, :3] = d_cam @ skew(p_b)
    j_pose[:, 3:] = -d_cam
    j_point = d_cam @ R_wb.T
    return uv - pixel, j_pose, j_point


def relative_transform_residual(pose_i: Pose, pose_j: Pose, meas: Pose):
    """log((T_meas)^-1 T_i^-1 T_j) and Jacobians w.r.t. both poses."""
    rel = pose_i.inverse().compose(pose_j)
    R_ij, t_ij = rel.R, rel.t
    Rm = meas.R
    e_rot = so3_log_matrix(Rm.T @ R_ij)
    e_trn = Rm.T @ (t_ij - meas.t)
    jr_inv = so3_right_jacobian_inv(e_rot)

    j_i = np.zeros((6, 6))
    j_i[:3, :3] = -jr_inv @ R_ij.T
    j_i[3:, :3] = Rm.T @ skew(t_ij)
    j_i[3:, 3:] = -Rm.T

    j_j = np.zeros((6, 6))
    j_j[:3, :3] = jr_inv
    j_j[3:, 3:] = Rm.T @ R_ij
    return np.concatenate([e_rot, e_trn]), j_i, j_j


def preint_residual(
    pose_i: Pose,
    vel_i: np.ndarray,
    bias_i: np.ndarray,
    pose_j: Pose,
    vel_j: np.ndarray,
    preint: PreintegratedImu,
    gravity: np.ndarray,
):
    """Forster-style (e_R, e_p, e_v) residual with first-order bias correction.

    bias_i is the 6-vector (b_a, b_g) of the earlier keyframe.  Returns
    (r (9,), jacobians dict with keys 'pose_i','vel_i','bias_i','pose_j','vel_j').
    """
    dt = preint.duration
    dba = bias_i[:3] - preint.reference_bias_accel
    dbg = bias_i[3:] - preint.reference_bias_gyro

    xi = preint.dR_dbg @ dbg
    dR_hat = preint.delta_rotation_matrix @ so3_exp_matrix(xi)
    dv_hat = preint.delta_velocity + preint.dv_dba @ dba + preint.dv_dbg @ dbg
    dp_hat = preint.delta_position + preint.dp_dba @ dba + preint.dp_dbg @ dbg

    Ri, Rj = pose_i.R, pose_j.R
    pi, pj = pose_i.t, pose_j.t

    e_rot = so3_log_matrix(dR_hat.T @ Ri.T @ Rj)
    dp_w = pj - pi - vel_i * dt - 0.5 * gravity * dt * dt
    dv_w = vel_j - vel_i - gravity * dt
    e_pos = Ri.T @ dp_w - dp_hat
    e_vel = Ri.T @ dv_w - dv_hat

    jr_inv = so3_right_jacobian_inv(e_rot)

    j_pose_i = np.zeros((9, 6))
    j_pose_i[0:3, 0:3] = -jr_inv @ Rj.T @ Ri
    j_pose_i[3:6, 0:3] = skew(Ri.T @ dp_w)
    j_pose_i[3:6, 3:6] = -np.eye(3)
    j_pose_i[6:9, 0:3] = skew(Ri.T @ dv_w)

    j_pose_j = np.zeros((9, 6))
    j_pose_j[0:3, 0:3] = jr_inv
    j_pose_j[3:6, 3:6] = Ri.T @ Rj

    j_vel_i = np.zeros((9, 3))
    j_vel_i[3:6] = -Ri.T * dt
    j_vel_i[6:9] = -Ri.T

    j_vel_j = np.zeros((9, 3))
    j_vel_j[6:9] = Ri.T

    j_bias = np.zeros((9, 6))
    j_bias[0:3, 3:6] = -jr_inv @ so3_exp_matrix(e_rot).T @ so3_right_jacobian(xi) @ preint.dR_dbg
    j_bias[3:6, 0:3] = -preint.dp_dba
    j_bias[3:6, 3:6] = -preint.dp_dbg
    j_bias[6:9, 0:3] = -preint.dv_dba
    j_bias[6:9, 3:6] = -preint.dv_dbg

    r = np.concatenate([e_rot, e_pos, e_vel])
    jac = {
        "pose_i": j_pose_i,
        "vel_i": j_vel_i,
        "bias_i": j_bias,
        "pose_j": j_pose_j,
        "vel_j": j_vel_j,
    }
    return r, jac


def bias_residual(bias_i: np.ndarray, bias_j: np.ndarray):
    """Random-walk bias error b_j - b_i with trivial Jacobians."""
    return bias_j - bias_i, -np.eye(6), np.eye(6)


def prior_point_residual(point: np.ndarray, prior: np.ndarray):
    """Cloud prior-point error: p_tilde - p."""
    return prior - point, -np.eye(3)


def point_to_point_residual(point: np.ndarray, map_point: np.ndarray):
    return map_point - point, -np.eye(3)


def point_to_plane_residual(point: np.ndarray, map_point: np.ndarray, normal: np.ndarray):
    """Signed plane distance times the normal: ((p_m - p) . n) n."""
    r_n = float((map_point - point) @ normal)
    return r_n * normal, -np.outer(normal, normal)


# ---------------------------------------------------------------------------
# factor objects consumed by the solver


class Factor:
    keys: tuple

    def blocks(self, values: dict) -> list[Block]:
        raise NotImplementedError

    def cost(self, values: dict) -> float:
        total = 0.0
        for b in self.blocks(values):
            rho, _ = huber(b.squared_error(), b.robust)
            total += rho
        return total


class ReprojectionSet(Factor):
    """All observations of one keyframe, evaluated in one vectorized pass.

    Produces one 2-dof block per observation; observations that project at
    or behind the minimum depth are skipped and counted in `skipped`.
    """

    def __init__(self, pose_key, point_keys, pixels, infos, camera, t_cb, robust=HUBER_DELTA_2DOF):
        self.pose_key = pose_key
        self.point_keys = list(point_keys)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.infos = np.asarray(infos, dtype=float).reshape(-1, 2, 2)
        self.camera = camera
        self.t_cb = t_cb
        self.robust = robust
        self.keys = (pose_key, *self.point_keys)
        self.skipped = 0

    def _project(self, values):
        pose = values[self.pose_key]
        pts_w = np.stack([values[k] for k in self.point_keys], axis=0)
        p_b = (pts_w - pose.t) @ pose.R
        p_c = p_b @ self.t_cb.R.T + self.t_cb.t
        uv, valid = self.camera.project_many(p_c)
        self.skipped = int(np.sum(~valid))
        return pose, p_b, p_c, uv, valid

    def blocks(self, values):
        pose, p_b, p_c, uv, valid = self._project(values)
        out = []
        R_cb = self.t_cb.R
        R_wb_t = pose.R.T
        for i in np.nonzero(valid)[0]:
            duv = self.camera.project_jacobian(p_c[i])
            d_cam = duv @ R_cb
            j_pose = np.empty((2, 6))
            j_pose[:, :3] = d_cam @ skew(p_b[i])
            j_pose[:, 3:] = -d_cam
            j_point = d_cam @ R_wb_t
            r = uv[i] - self.pixels[i]
            out.append(
                Block(r, self.infos[i], {self.pose_key: j_pose, self.point_keys[i]: j_point}, self.robust)
            )
        return out

    def cost(self, values):
        _, _, _, uv, valid = self._project(values)
        if not np.any(valid):
            return 0.0
        r = uv[valid] - self.pixels[valid]
        s = np.einsum("ni,nij,nj->n", r, self.infos[valid], r)
        if self.robust is None:
            return float(np.sum(s))
        over = s > self.robust
        out = np.where(over, 2.0 * np.sqrt(self.robust * np.maximum(s, 0.0)) - self.robust, s)
        return float(np.sum(out))


class PreintFactor(Factor):
    def __init__(self, pose_i, vel_i, bias_i, pose_j, vel_j, preint, gravity, robust=HUBER_DELTA_9DOF):
        self.keys = (pose_i, vel_i, bias_i, pose_j, vel_j)
        self.preint = preint
        self.gravity = np.asarray(gravity, dtype=float)
        self.robust = robust

    def blocks(self, values):
        ki, kvi, kb, kj, kvj = self.keys
        r, jac = preint_residual(
            values[ki], values[kvi], values[kb], values[kj], values[kvj], self.preint, self.gravity
        )
        jmap = {
            ki: jac["pose_i"],
            kvi: jac["vel_i"],
            kb: jac["bias_i"],
            kj: jac["pose_j"],
            kvj: jac["vel_j"],
        }
        return [Block(r, self.preint.info, jmap, self.robust)]


class BiasFactor(Factor):
    def __init__(self, bias_i, bias_j, info, robust=HUBER_DELTA_6DOF):
        self.keys = (bias_i, bias_j)
        self.info = np.asarray(info, dtype=float)
        self.robust = robust

    def blocks(self, values):
        ki, kj = self.keys
        r, j_i, j_j = bias_residual(values[ki], values[kj])
        return [Block(r, self.info, {ki: j_i, kj: j_j}, self.robust)]


class RelativeTransformFactor(Factor):
    def __init__(self, pose_i, pose_j, measurement: Pose, info, robust=HUBER_DELTA_6DOF):
        self.keys = (pose_i, pose_j)
        self.measurement = measurement
        self.info = np.asarray(info, dtype=float)
        self.robust = robust

    def blocks(self, values):
        ki, kj = self.keys
        r, j_i, j_j = relative_transform_residual(values[ki], values[kj], self.measurement)
        return [Block(r, self.info, {ki: j_i, kj: j_j}, self.robust)]


class PriorPointFactor(Factor):
    def __init__(self, point_key, prior, info, robust=HUBER_DELTA_3DOF):
        self.keys = (point_key,)
        self.prior = np.asarray(prior, dtype=float)
        self.info = np.asarray(info, dtype=float)
        self.robust = robust

    def blocks(self, values):
        (k,) = self.keys
        r, j = prior_point_residual(values[k], self.prior)
        return [Block(r, self.info, {k: j}, self.robust)]


class PointToPointFactor(Factor):
    def __init__(self, point_key, map_point, info, robust=HUBER_DELTA_3DOF):
        self.keys = (point_key,)
        self.map_point = np.asarray(map_point, dtype=float)
        self.info = np.asarray(info, dtype=float)
        self.robust = robust

    def blocks(self, values):
        (k,) = self.keys
        r, j = point_to_point_residual(values[k], self.map_point)
        return [Block(r, self.info, {k: j}, self.robust)]


class PointToPlaneFactor(Factor):
    """Plane-distance factor; scalar weight applied along the normal."""

    def __init__(self, point_key, map_point, normal, weight, robust=HUBER_DELTA_3DOF):
        self.keys = (point_key,)
        self.map_point = np.asarray(map_point, dtype=float)
        self.normal = np.asarray(normal, dtype=float)
        self.info = float(weight) * np.eye(3)
        self.robust = robust

    def blocks(self, values):
        (k,) = self.keys
        r, j = point_to_plane_residual(values[k], self.map_point, self.normal)
        return [Block(r, self.info, {k: j}, self.robust)]
