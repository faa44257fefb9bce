"""Delayed-state error-state EKF fusing IMU, odometry and cloud localization.

State: T^W_B, velocity, IMU biases, and T^W_O as a slowly varying drift
state.  The error state is minimal, 21-dimensional, ordered
(phi_B, p_B, v, b_a, b_g, phi_O, p_O) with body-right rotation errors and
additive translation errors; the covariance is 21x21 with no padding.

Delayed measurements are handled by rewind-and-replay over a state buffer:
the filter restores the snapshot just before the measurement's bracketing
entry and replays the buffered IMU stream, re-applying every logged
measurement in (epoch, arrival) order.  This reproduces the in-order batch
solution exactly, which is what the replay-equivalence test checks.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .errors import NonMonotoneTime
from .preintegration import ACCEL_DENSITY_FLOOR, BIAS_WALK_FLOOR, GYRO_DENSITY_FLOOR
from .se3 import (
    Pose,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
)
from .types import ImuSample, symmetrize
from .world import NoiseConfig

_PHI_B = slice(0, 3)
_P_B = slice(3, 6)
_V = slice(6, 9)
_B_A = slice(9, 12)
_B_G = slice(12, 15)
_PHI_O = slice(15, 18)
_P_O = slice(18, 21)
DIM = 21


@dataclass
class EkfConfig:
    buffer_horizon: float = 10.0  # s, sized for the worst expected latency
    odom_sigma_trans: float = 0.02  # m
    odom_sigma_rot_deg: float = 0.3
    loc_sigma_trans: float = 0.3  # m
    loc_sigma_rot_deg: float = 1.0
    use_cloud_info: bool = False
    gate_quantile: float = 0.999
    init_sigma_rot_deg: float = 0.5
    init_sigma_trans: float = 0.05
    init_sigma_vel: float = 0.05
    init_sigma_ba: float = 0.05
    init_sigma_bg: float = 0.005
    anchor_sigma_rot_deg: float = 2.0  # initial T^W_O prior
    anchor_sigma_trans: float = 0.5
    anchor_walk_rot: float = 1e-5  # rad/sqrt(s), T^W_O process noise
    anchor_walk_trans: float = 1e-4  # m/sqrt(s)


@dataclass
class EkfNominal:
    q_b: np.ndarray
    p_b: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    q_o: np.ndarray
    p_o: np.ndarray

    def copy(self) -> "EkfNominal":
        return EkfNominal(
            *(x.copy() for x in (self.q_b, self.p_b, self.v, self.ba, self.bg, self.q_o, self.p_o))
        )

    def pose_wb(self) -> Pose:
        return Pose(self.q_b, self.p_b)

    def pose_wo(self) -> Pose:
        return Pose(self.q_o, self.p_o)

    def inject(self, delta: np.ndarray) -> None:
        self.q_b = quat_normalize(quat_multiply(self.q_b, so3_exp(delta[_PHI_B])))
        self.p_b = self.p_b + delta[_P_B]
        self.v = self.v + delta[_V]
        self.ba = self.ba + delta[_B_A]
        self.bg = self.bg + delta[_B_G]
        self.q_o = quat_normalize(quat_multiply(self.q_o, so3_exp(delta[_PHI_O])))
        self.p_o = self.p_o + delta[_P_O]


@dataclass
class _BufferEntry:
    timestamp: float
    nominal: EkfNominal
    cov: np.ndarray
    sample: ImuSample | None


class FusionEkf:
    def __init__(
        self,
        config: EkfConfig,
        t0: float,
        pose_wb0: Pose,
        velocity0: np.ndarray,
        pose_wo0: Pose,
        gravity: np.ndarray,
        noise: NoiseConfig,
    ):
        self.config = config
        self.gravity = np.asarray(gravity, dtype=float)
        self.sg = max(noise.gyro_noise_density, GYRO_DENSITY_FLOOR)
        self.sa = max(noise.accel_noise_density, ACCEL_DENSITY_FLOOR)
        self.wg = max(noise.gyro_bias_walk, BIAS_WALK_FLOOR)
        self.wa = max(noise.accel_bias_walk, BIAS_WALK_FLOOR)
        self.time = t0
        self.nominal = EkfNominal(
            pose_wb0.q.copy(),
            pose_wb0.t.copy(),
            np.asarray(velocity0, dtype=float).copy(),
            np.zeros(3),
            np.zeros(3),
            pose_wo0.q.copy(),
            pose_wo0.t.copy(),
        )
        cov = np.zeros((DIM, DIM))
        cov[_PHI_B, _PHI_B] = np.deg2rad(config.init_sigma_rot_deg) ** 2 * np.eye(3)
        cov[_P_B, _P_B] = config.init_sigma_trans**2 * np.eye(3)
        cov[_V, _V] = config.init_sigma_vel**2 * np.eye(3)
        cov[_B_A, _B_A] = config.init_sigma_ba**2 * np.eye(3)
        cov[_B_G, _B_G] = config.init_sigma_bg**2 * np.eye(3)
        cov[_PHI_O, _PHI_O] = np.deg2rad(config.anchor_sigma_rot_deg) ** 2 * np.eye(3)
        cov[_P_O, _P_O] = config.anchor_sigma_trans**2 * np.eye(3)
        self.cov = cov
        self.buffer: list[_BufferEntry] = [_BufferEntry(t0, self.nominal.copy(), cov.copy(), None)]
        self.meas_log: list = []  # (epoch, seq, kind, pose, info), sorted
        self._meas_seq = 0
        self.initialized_anchor = False
        self.too_old = 0
        self.gated = 0
        self._gate = float(chi2.ppf(config.gate_quantile, 6))
        self.outputs = 0

    # ------------------------------------------------------------------
    # propagation

    def _step(self, nominal: EkfNominal, cov: np.ndarray, s0: ImuSample, s1: ImuSample) -> np.ndarray:
        """Midpoint strapdown on the nominal plus error-state covariance."""
        dt = s1.timestamp - s0.timestamp
        if dt <= 0.0:
            raise NonMonotoneTime(f"imu dt {dt}")
        w_mid = 0.5 * (s0.angular_velocity + s1.angular_velocity) - nominal.bg
        a_mid_b = 0.5 * (s0.linear_acceleration + s1.linear_acceleration) - nominal.ba
        theta = w_mid * dt
        R0 = quat_to_matrix(nominal.q_b)
        q1 = quat_normalize(quat_multiply(nominal.q_b, so3_exp(theta)))
        R1 = quat_to_matrix(q1)
        a0 = s0.linear_acceleration - nominal.ba
        a1 = s1.linear_acceleration - nominal.ba
        a_w = 0.5 * (R0 @ a0 + R1 @ a1) + self.gravity

        nominal.p_b = nominal.p_b + nominal.v * dt + 0.5 * a_w * dt * dt
        nominal.v = nominal.v + a_w * dt
        nominal.q_b = q1

        E = quat_to_matrix(so3_exp(theta))
        Jr = so3_right_jacobian(theta)
        ra = R0 @ skew(a_mid_b)
        F = np.eye(DIM)
        F[_PHI_B, _PHI_B] = E.T
        F[_PHI_B, _B_G] = -Jr * dt
        F[_P_B, _PHI_B] = -0.5 * ra * dt * dt
        F[_P_B, _V] = np.eye(3) * dt
        F[_P_B, _B_A] = -0.5 * R0 * dt * dt
        F[_V, _PHI_B] = -ra * dt
        F[_V, _B_A] = -R0 * dt

        Q = np.zeros((DIM, DIM))
        sg2, sa2 = self.sg**2, self.sa**2
        Q[_PHI_B, _PHI_B] = sg2 * dt * np.eye(3)
        Q[_V, _V] = sa2 * dt * np.eye(3)
        Q[_P_B, _P_B] = sa2 * dt**3 / 3.0 * np.eye(3)
        Q[_P_B, _V] = Q[_V, _P_B] = sa2 * dt**2 / 2.0 * np.eye(3)
        Q[_B_A, _B_A] = self.wa**2 * dt * np.eye(3)
        Q[_B_G, _B_G] = self.wg**2 * dt * np.eye(3)
        Q[_PHI_O, _PHI_O] = self.config.anchor_walk_rot**2 * dt * np.eye(3)
        Q[_P_O, _P_O] = self.config.anchor_walk_trans**2 * dt * np.eye(3)

        return symmetrize(F @ cov @ F.T + Q)

    def propagate(self, sample: ImuSample) -> None:
        """Advance to the sample's timestamp; one fused output per call."""
        last = self.buffer[-1]
        if last.sample is None:
            # first sample seeds the stream; no state change
            if sample.timestamp < last.timestamp - 1e-12:
                raise NonMonotoneTime("first sample precedes the initial state")
            self.buffer[-1] = _BufferEntry(last.timestamp, last.nominal, last.cov, sample)
            self.outputs += 1
            return
        if sample.timestamp <= last.timestamp:
            raise NonMonotoneTime(f"sample at {sample.timestamp} after {last.timestamp}")
        self.cov = self._step(self.nominal, self.cov, last.sample, sample)
        self.time = sample.timestamp
        self.buffer.append(_BufferEntry(self.time, self.nominal.copy(), self.cov.copy(), sample))
        self._prune()
        self.outputs += 1

    def _prune(self) -> None:
        horizon = self.time - self.config.buffer_horizon
        while len(self.buffer) > 2 and self.buffer[1].timestamp <= horizon:
            self.buffer.pop(0)
        while self.meas_log and self.meas_log[0][0] < self.buffer[0].timestamp:
            self.meas_log.pop(0)

    # ------------------------------------------------------------------
    # measurement models

    def _residual_and_jacobian(self, kind: str, pose_meas: Pose):
        nom = self.nominal
        H = np.zeros((6, DIM))
        if kind == "loc":
            h_pose = nom.pose_wb()
            H[0:3, _PHI_B] = np.eye(3)
            H[3:6, _P_B] = np.eye(3)
        else:  # odometry: h = (T^W_O)^-1 T^W_B
            t_ow = nom.pose_wo().inverse()
            h_pose = t_ow.compose(nom.pose_wb())
            R_ow = t_ow.R
            H[0:3, _PHI_B] = np.eye(3)
            H[0:3, _PHI_O] = -h_pose.R.T
            H[3:6, _P_B] = R_ow
            H[3:6, _PHI_O] = skew(h_pose.t)
            H[3:6, _P_O] = -R_ow
        r_rot = so3_log(quat_multiply(quat_conjugate(h_pose.q), pose_meas.q))
        r_trn = pose_meas.t - h_pose.t
        return np.concatenate([r_rot, r_trn]), H

    def _meas_cov(self, kind: str, info: np.ndarray | None) -> np.ndarray:
        cfg = self.config
        if kind == "loc" and cfg.use_cloud_info and info is not None:
            return symmetrize(np.linalg.inv(info))
        if kind == "loc":
            sr, st = np.deg2rad(cfg.loc_sigma_rot_deg), cfg.loc_sigma_trans
        else:
            sr, st = np.deg2rad(cfg.odom_sigma_rot_deg), cfg.odom_sigma_trans
        return np.diag([sr**2] * 3 + [st**2] * 3)

    def _apply(self, kind: str, pose_meas: Pose, info: np.ndarray | None) -> None:
        if kind == "loc" and not self.initialized_anchor:
            self._initialize_anchor(pose_meas, info)
            return
        r, H = self._residual_and_jacobian(kind, pose_meas)
        R_meas = self._meas_cov(kind, info)
        S = H @ self.cov @ H.T + R_meas
        m2 = float(r @ np.linalg.solve(S, r))
        if m2 > self._gate:
            self.gated += 1
            return
        K = self.cov @ H.T @ np.linalg.inv(S)
        delta = K @ r
        IKH = np.eye(DIM) - K @ H
        self.cov = symmetrize(IKH @ self.cov @ IKH.T + K @ R_meas @ K.T)
        self.nominal.inject(delta)

    def _initialize_anchor(self, pose_meas: Pose, info: np.ndarray | None) -> None:
        """First cloud fix: reset T^W_B and T^W_O around the measurement."""
        t_ob = self.nominal.pose_wo().inverse().compose(self.nominal.pose_wb())
        self.nominal.q_b = pose_meas.q.copy()
        self.nominal.p_b = pose_meas.t.copy()
        anchor = pose_meas.compose(t_ob.inverse())
        self.nominal.q_o = anchor.q.copy()
        self.nominal.p_o = anchor.t.copy()
        R_meas = self._meas_cov("loc", info)
        for sl in (_PHI_B, _P_B, _PHI_O, _P_O):
            self.cov[sl, :] = 0.0
            self.cov[:, sl] = 0.0
        self.cov[_PHI_B, _PHI_B] = R_meas[:3, :3]
        self.cov[_P_B, _P_B] = R_meas[3:, 3:]
        self.cov[_PHI_O, _PHI_O] = (
            R_meas[:3, :3] + np.deg2rad(self.config.odom_sigma_rot_deg) ** 2 * np.eye(3)
        )
        self.cov[_P_O, _P_O] = R_meas[3:, 3:] + self.config.odom_sigma_trans**2 * np.eye(3)
        self.cov = symmetrize(self.cov)
        self.initialized_anchor = True

    # ------------------------------------------------------------------
    # delayed updates

    def update_odometry(self, t_meas: float, pose_ob: Pose) -> bool:
        """T^O_B measurement at epoch t_meas; False when outside the buffer."""
        return self._delayed("odom", t_meas, pose_ob, None)

    def update_localization(self, t_meas: float, pose_wb: Pose, info: np.ndarray | None = None) -> bool:
        return self._delayed("loc", t_meas, pose_wb, info)

    def _bracket(self, epoch: float) -> int:
        times = [e.timestamp for e in self.buffer]
        return max(bisect.bisect_right(times, epoch + 1e-9) - 1, 0)

    def _delayed(self, kind: str, t_meas: float, pose: Pose, info) -> bool:
        if t_meas > self.time + 1e-9:
            raise NonMonotoneTime(f"measurement at {t_meas} is in the simulated future")
        if t_meas < self.buffer[0].timestamp - 1e-9:
            self.too_old += 1
            return False
        self._meas_seq += 1
        bisect.insort(self.meas_log, (t_meas, self._meas_seq, kind, pose, info), key=lambda e: (e[0], e[1]))

        i = self._bracket(t_meas)
        if i == 0:
            # measurement lands on the horizon-edge entry; apply in arrival
            # order on top of that snapshot, then replay everything after it
            base = self.buffer[0]
            self.nominal = base.nominal.copy()
            self.cov = base.cov.copy()
            self.time = base.timestamp
            self._apply(kind, pose, info)
            self.buffer[0] = _BufferEntry(base.timestamp, self.nominal.copy(), self.cov.copy(), base.sample)
            start = 1
        else:
            # restore the snapshot strictly before the bracketing entry and
            # replay from there so same-epoch measurements stay in order
            base = self.buffer[i - 1]
            self.nominal = base.nominal.copy()
            self.cov = base.cov.copy()
            self.time = base.timestamp
            start = i

        # measurements bracket to the latest entry at or before their epoch;
        # replay applies each bracket's batch in (epoch, arrival) order
        epochs = [e[0] for e in self.meas_log]
        for k in range(start, len(self.buffer)):
            prev, cur = self.buffer[k - 1], self.buffer[k]
            self.cov = self._step(self.nominal, self.cov, prev.sample, cur.sample)
            self.time = cur.timestamp
            lo = bisect.bisect_left(epochs, cur.timestamp - 1e-9)
            if k == len(self.buffer) - 1:
                hi = len(epochs)
            else:
                hi = bisect.bisect_left(epochs, self.buffer[k + 1].timestamp - 1e-9)
            for e in self.meas_log[lo:hi]:
                self._apply(e[2], e[3], e[4])
            self.buffer[k] = _BufferEntry(cur.timestamp, self.nominal.copy(), self.cov.copy(), cur.sample)
        return True

    # ------------------------------------------------------------------

    def pose_wb(self) -> Pose:
        return self.nominal.pose_wb()

    def pose_wo(self) -> Pose:
        return self.nominal.pose_wo()
