"""On-manifold IMU preintegration between keyframes.

Midpoint (trapezoidal) integration of the relative rotation, velocity and
position deltas, with first-order bias Jacobians and a 9x9 covariance
propagated from the continuous noise densities.  The information matrix is
ordered (rotation, position, velocity) to match the residual layout used by
the inertial factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInterval
from .se3 import quat_multiply, quat_normalize, quat_to_matrix, skew, so3_exp, so3_right_jacobian
from .types import ImuSample, symmetrize
from .world import NoiseConfig

# Weights for "perfectly clean" sensors stay finite: zero densities are
# floored before building information matrices.
GYRO_DENSITY_FLOOR = 1e-7
ACCEL_DENSITY_FLOOR = 1e-6
BIAS_WALK_FLOOR = 1e-9

# internal covariance ordering (phi, v, p) -> residual ordering (phi, p, v)
_PERM = np.array([0, 1, 2, 6, 7, 8, 3, 4, 5])


@dataclass
class PreintegratedImu:
    delta_rotation: np.ndarray  # quaternion wxyz
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    duration: float
    reference_bias_accel: np.ndarray
    reference_bias_gyro: np.ndarray
    info: np.ndarray  # 9x9, rows/cols ordered (e_R, e_p, e_v)
    bias_jacobians: np.ndarray  # 9x6: d(dR,dp,dv)/d(b_a,b_g), same row order
    bias_info: np.ndarray  # 6x6 for the bias random-walk error (b_a, b_g)

    @property
    def delta_rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.delta_rotation)

    # named slices of bias_jacobians
    @property
    def dR_dbg(self) -> np.ndarray:
        return self.bias_jacobians[0:3, 3:6]

    @property
    def dp_dba(self) -> np.ndarray:
        return self.bias_jacobians[3:6, 0:3]

    @property
    def dp_dbg(self) -> np.ndarray:
        return self.bias_jacobians[3:6, 3:6]

    @property
    def dv_dba(self) -> np.ndarray:
        return self.bias_jacobians[6:9, 0:3]

    @property
    def dv_dbg(self) -> np.ndarray:
        return self.bias_jacobians[6:9, 3:6]


def preintegrate(
    samples: list[ImuSample],
    bias_accel: np.ndarray,
    bias_gyro: np.ndarray,
    noise: NoiseConfig,
) -> PreintegratedImu:
    """Compound an IMU stretch into a single relative-motion factor.

    `samples` must contain at least two strictly increasing timestamps; the
    deltas cover [samples[0].t, samples[-1].t] at the given reference bias.
    """
    if len(samples) < 2:
        raise EmptyInterval(f"need at least 2 samples, got {len(samples)}")

    sg = max(noise.gyro_noise_density, GYRO_DENSITY_FLOOR)
    sa = max(noise.accel_noise_density, ACCEL_DENSITY_FLOOR)

    q = np.array([1.0, 0.0, 0.0, 0.0])
    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)

    jr_g = np.zeros((3, 3))  # d(Log dR)/d(b_g)
    jv_a = np.zeros((3, 3))
    jv_g = np.zeros((3, 3))
    jp_a = np.zeros((3, 3))
    jp_g = np.zeros((3, 3))

    cov = np.zeros((9, 9))  # (phi, v, p)

    prev = samples[0]
    for cur in samples[1:]:
        dt = cur.timestamp - prev.timestamp
        if dt <= 0.0:
            raise EmptyInterval("timestamps must be strictly increasing")
        w_mid = 0.5 * (prev.angular_velocity + cur.angular_velocity) - bias_gyro
        a0 = prev.linear_acceleration - bias_accel
        a1 = cur.linear_acceleration - bias_accel

        theta = w_mid * dt
        dq_step = so3_exp(theta)
        E = quat_to_matrix(dq_step)
        Jr = so3_right_jacobian(theta)
        dR_next = dR @ E

        a_mid = 0.5 * (dR @ a0 + dR_next @ a1)
        dv_next = dv + a_mid * dt
        dp_next = dp + dv * dt + 0.5 * a_mid * dt * dt

        # bias jacobians (first order)
        sk0 = dR @ skew(a0)
        sk1 = dR_next @ skew(a1)
        da_dbg = -0.5 * (sk0 @ jr_g + sk1 @ (E.T @ jr_g - Jr * dt))
        da_dba = -0.5 * (dR + dR_next)
        jp_a = jp_a + jv_a * dt + 0.5 * da_dba * dt * dt
        jp_g = jp_g + jv_g * dt + 0.5 * da_dbg * dt * dt
        jv_a = jv_a + da_dba * dt
        jv_g = jv_g + da_dbg * dt
        jr_g = E.T @ jr_g - Jr * dt

        # covariance propagation in (phi, v, p)
        dphi = -0.5 * (sk0 + sk1 @ E.T)  # d a_mid / d phi_k
        F = np.eye(9)
        F[0:3, 0:3] = E.T
        F[3:6, 0:3] = dphi * dt
        F[6:9, 0:3] = 0.5 * dphi * dt * dt
        F[6:9, 3:6] = np.eye(3) * dt

        G = np.zeros((9, 6))
        G[0:3, 0:3] = Jr * dt
        gv = -0.5 * sk1 @ Jr * dt
        G[3:6, 0:3] = gv * dt
        G[3:6, 3:6] = 0.5 * (dR + dR_next) * dt
        G[6:9, 0:3] = 0.5 * gv * dt * dt
        G[6:9, 3:6] = 0.25 * (dR + dR_next) * dt * dt

        Qn = np.diag([sg * sg / dt] * 3 + [sa * sa / dt] * 3)
        cov = F @ cov @ F.T + G @ Qn @ G.T

        q = quat_normalize(quat_multiply(q, dq_step))
        dR = quat_to_matrix(q)
        dv, dp = dv_next, dp_next
        prev = cur

    duration = samples[-1].timestamp - samples[0].timestamp
    cov = symmetrize(cov)[np.ix_(_PERM, _PERM)]
    info = symmetrize(np.linalg.inv(cov))

    jac = np.zeros((9, 6))
    jac[0:3, 3:6] = jr_g
    jac[3:6, 0:3] = jp_a
    jac[3:6, 3:6] = jp_g
    jac[6:9, 0:3] = jv_a
    jac[6:9, 3:6] = jv_g

    wa = max(noise.accel_bias_walk, BIAS_WALK_FLOOR)
    wg = max(noise.gyro_bias_walk, BIAS_WALK_FLOOR)
    bias_info = np.diag(
        [1.0 / (wa * wa * duration)] * 3 + [1.0 / (wg * wg * duration)] * 3
    )

    return PreintegratedImu(
        delta_rotation=q,
        delta_velocity=dv,
        delta_position=dp,
        duration=duration,
        reference_bias_accel=np.asarray(bias_accel, dtype=float).copy(),
        reference_bias_gyro=np.asarray(bias_gyro, dtype=float).copy(),
        info=info,
        bias_jacobians=jac,
        bias_info=bias_info,
    )
