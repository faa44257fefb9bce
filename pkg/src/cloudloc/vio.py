"""Sliding-window inertial-aided bundle adjustment on the robot.

Single-threaded pipeline: IMU samples propagate a running nav state, frames
either become keyframes or are discarded, and each new keyframe triggers a
window optimization that also folds in whatever cloud feedback is queued in
the inbox at that moment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import PinholeCamera
from .errors import MissingPreintegration
from .factors import (
    BiasFactor,
    PreintFactor,
    PriorPointFactor,
    RelativeTransformFactor,
    ReprojectionSet,
)
from .messages import CloudConstraintSet
from .preintegration import PreintegratedImu, preintegrate
from .se3 import Pose, quat_multiply, quat_to_matrix, so3_exp
from .solver import SolveOptions, solve, total_cost
from .types import ImuSample, NavState, PixelObservation
from .world import Frame, NoiseConfig


@dataclass
class VioConfig:
    window_size: int = 10  # l
    theta: int = 3  # point stability threshold (strict >)
    kf_translation: float = 0.5  # m
    kf_rotation_deg: float = 10.0
    kf_elapsed: float = 1.0  # s
    max_iterations: int = 12
    min_triangulation_depth: float = 0.2


@dataclass
class Keyframe:
    kf_id: int
    nav_state: NavState
    observations: list  # list[PixelObservation] re-tagged with kf_id
    preint_to_next: PreintegratedImu | None = None


@dataclass
class MapPoint:
    point_id: int
    position: np.ndarray | None = None
    observing_kfs: list = field(default_factory=list)
    cloud_prior: object = None  # ResultPoint | None
    initialized: bool = False

    @property
    def observation_count(self) -> int:
        return len(self.observing_kfs)


def strapdown_step(pose: Pose, vel, bias_accel, bias_gyro, s0: ImuSample, s1: ImuSample, gravity):
    """One midpoint strapdown step; same scheme as the preintegration."""
    dt = s1.timestamp - s0.timestamp
    w_mid = 0.5 * (s0.angular_velocity + s1.angular_velocity) - bias_gyro
    q_next = quat_multiply(pose.q, so3_exp(w_mid * dt))
    R0 = pose.R
    R1 = quat_to_matrix(q_next / np.linalg.norm(q_next))
    a0 = s0.linear_acceleration - bias_accel
    a1 = s1.linear_acceleration - bias_accel
    a_w = 0.5 * (R0 @ a0 + R1 @ a1) + gravity
    p_next = pose.t + vel * dt + 0.5 * a_w * dt * dt
    v_next = vel + a_w * dt
    return Pose(q_next, p_next), v_next


@dataclass
class BaOutcome:
    report: object
    dropped_constraints: int
    behind_camera: int
    n_points: int


class SlidingWindowVio:
    def __init__(
        self,
        config: VioConfig,
        camera: PinholeCamera,
        t_cb: Pose,
        initial_state: NavState,
        gravity: np.ndarray,
        noise: NoiseConfig,
    ):
        self.config = config
        self.camera = camera
        self.t_cb = t_cb
        self.gravity = np.asarray(gravity, dtype=float)
        self.noise = noise
        self.current = initial_state.copy()
        self.window: list[Keyframe] = []
        self.points: dict[int, MapPoint] = {}
        self._pending: list[ImuSample] = []
        self._inbox: list[CloudConstraintSet] = []
        self._rel_constraints: dict = {}  # (i, j) -> ResultRelativeTransform
        self._pt_constraints: dict = {}  # point_id -> ResultPoint
        self._next_kf_id = 0
        self.dropped_constraints = 0
        self.behind_camera = 0
        self.last_report = None

    # ------------------------------------------------------------------
    # inputs

    def add_imu(self, sample: ImuSample) -> None:
        if self._pending and sample.timestamp <= self._pending[-1].timestamp:
            return  # duplicate boundary sample
        if self._pending:
            pose, vel = strapdown_step(
                self.current.pose,
                self.current.velocity,
                self.current.bias_accel,
                self.current.bias_gyro,
                self._pending[-1],
                sample,
                self.gravity,
            )
            self.current = NavState(
                sample.timestamp, pose, vel, self.current.bias_accel, self.current.bias_gyro
            )
        else:
            self.current.timestamp = sample.timestamp
        self._pending.append(sample)

    def enqueue_cloud(self, constraints: CloudConstraintSet) -> None:
        self._inbox.append(constraints)

    # ------------------------------------------------------------------
    # keyframe policy

    def _is_keyframe(self, timestamp: float) -> bool:
        if not self.window:
            return True
        last = self.window[-1].nav_state
        if timestamp - last.timestamp >= self.config.kf_elapsed:
            return True
        if self.current.pose.translation_distance_to(last.pose) > self.config.kf_translation:
            return True
        rot = self.current.pose.rotation_angle_to(last.pose)
        return rot > np.deg2rad(self.config.kf_rotation_deg)

    def process_frame(self, frame: Frame) -> Keyframe | None:
        """Returns the new keyframe after optimization, or None."""
        assert frame.timestamp <= self.current.timestamp + 1e-9, "frame ahead of IMU stream"
        if not self._is_keyframe(frame.timestamp):
            return None

        kf = Keyframe(self._next_kf_id, self.current.copy(), [])
        self._next_kf_id += 1
        kf.observations = [
            PixelObservation(o.point_id, kf.kf_id, o.pixel, o.info) for o in frame.observations
        ]

        if self.window:
            prev = self.window[-1]
            if len(self._pending) < 2:
                raise MissingPreintegration(
                    f"no IMU between keyframes {prev.kf_id} and {kf.kf_id}"
                )
            prev.preint_to_next = preintegrate(
                self._pending,
                prev.nav_state.bias_accel,
                prev.nav_state.bias_gyro,
                self.noise,
            )
        self._pending = self._pending[-1:]

        self.window.append(kf)
        for o in kf.observations:
            pt = self.points.get(o.point_id)
            if pt is None:
                pt = MapPoint(o.point_id)
                self.points[o.point_id] = pt
            pt.observing_kfs.append(kf.kf_id)

        while len(self.window) > self.config.window_size:
            self._evict(self.window.pop(0))

        self._triangulate_new()
        self._drain_inbox()
        if len(self.window) >= 2:
            self.optimize()
        return kf

    def _evict(self, kf: Keyframe) -> None:
        for o in kf.observations:
            pt = self.points.get(o.point_id)
            if pt is None:
                continue
            pt.observing_kfs = [k for k in pt.observing_kfs if k != kf.kf_id]
            if not pt.observing_kfs:
                del self.points[o.point_id]
                self._pt_constraints.pop(o.point_id, None)

    # ------------------------------------------------------------------
    # points

    def _kf_by_id(self, kf_id: int) -> Keyframe | None:
        for kf in self.window:
            if kf.kf_id == kf_id:
                return kf
        return None

    def _triangulate_new(self) -> None:
        obs_by_point: dict[int, list] = {}
        for kf in self.window:
            for o in kf.observations:
                obs_by_point.setdefault(o.point_id, []).append((kf, o))
        for pid, pairs in obs_by_point.items():
            pt = self.points.get(pid)
            if pt is None or pt.initialized or len(pairs) < 2:
                continue
            pos = self._triangulate(pairs)
            if pos is not None:
                pt.position = pos
                pt.initialized = True

    def _triangulate(self, pairs) -> np.ndarray | None:
        rows, rhs = [], []
        cams = []
        for kf, o in pairs:
            t_co = self.t_cb.compose(kf.nav_state.pose.inverse())
            R, t = t_co.R, t_co.t
            xn = (o.pixel[0] - self.camera.cx) / self.camera.fx
            yn = (o.pixel[1] - self.camera.cy) / self.camera.fy
            rows.append(xn * R[2] - R[0])
            rhs.append(t[0] - xn * t[2])
            rows.append(yn * R[2] - R[1])
            rhs.append(t[1] - yn * t[2])
            cams.append(t_co)
        A = np.array(rows)
        b = np.array(rhs)
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[-1] < 1e-4 * sv[0]:
            return None
        p, *_ = np.linalg.lstsq(A, b, rcond=None)
        for t_co in cams:
            if t_co.act(p)[2] < self.config.min_triangulation_depth:
                return None
        return p

    # ------------------------------------------------------------------
    # cloud feedback

    def _drain_inbox(self) -> None:
        for cset in self._inbox:
            for rel in cset.relative_transforms:
                self._rel_constraints[(rel.from_kf, rel.to_kf)] = rel
            for pp in cset.point_priors:
                self._pt_constraints[pp.point_id] = pp
                pt = self.points.get(pp.point_id)
                if pt is not None:
                    pt.cloud_prior = pp
        self._inbox.clear()

    def _active_points(self) -> dict:
        """Points that enter the optimization."""
        out = {}
        for pid, pt in self.points.items():
            if not pt.initialized:
                continue
            if len(pt.observing_kfs) >= 2 or pid in self._pt_constraints:
                out[pid] = pt
        return out

    # ------------------------------------------------------------------
    # optimization

    def build_problem(self):
        """Assemble (values, factors, fixed, eliminated) for the window."""
        values: dict = {}
        factors: list = []
        window_ids = {kf.kf_id for kf in self.window}
        active = self._active_points()

        for kf in self.window:
            values[("pose", kf.kf_id)] = kf.nav_state.pose
            values[("vel", kf.kf_id)] = kf.nav_state.velocity.copy()
            values[("bias", kf.kf_id)] = np.concatenate(
                [kf.nav_state.bias_accel, kf.nav_state.bias_gyro]
            )
        for pid, pt in active.items():
            values[("pt", pid)] = pt.position.copy()

        for kf in self.window:
            keys, pixels, infos = [], [], []
            for o in kf.observations:
                if o.point_id in active:
                    keys.append(("pt", o.point_id))
                    pixels.append(o.pixel)
                    infos.append(o.info)
            if keys:
                factors.append(
                    ReprojectionSet(("pose", kf.kf_id), keys, pixels, infos, self.camera, self.t_cb)
                )

        for a, b in zip(self.window[:-1], self.window[1:]):
            if a.preint_to_next is None:
                raise MissingPreintegration(f"keyframe {a.kf_id} has no preintegration")
            factors.append(
                PreintFactor(
                    ("pose", a.kf_id),
                    ("vel", a.kf_id),
                    ("bias", a.kf_id),
                    ("pose", b.kf_id),
                    ("vel", b.kf_id),
                    a.preint_to_next,
                    self.gravity,
                )
            )
            factors.append(
                BiasFactor(("bias", a.kf_id), ("bias", b.kf_id), a.preint_to_next.bias_info)
            )

        dropped = 0
        for (i, j), rel in list(self._rel_constraints.items()):
            if i in window_ids and j in window_ids:
                factors.append(
                    RelativeTransformFactor(("pose", i), ("pose", j), rel.measurement, rel.info)
                )
            else:
                dropped += 1
                if j < min(window_ids):
                    del self._rel_constraints[(i, j)]
        for pid, prior in list(self._pt_constraints.items()):
            if pid in active:
                factors.append(PriorPointFactor(("pt", pid), prior.position, prior.info))
            elif pid not in self.points:
                dropped += 1
                del self._pt_constraints[pid]

        # gauge: the oldest pose is locked; its velocity and bias are locked
        # with it, anchoring the bias chain in place of a marginal prior
        oldest = self.window[0].kf_id
        fixed = {("pose", oldest), ("vel", oldest), ("bias", oldest)}
        eliminated = {("pt", pid) for pid in active}
        return values, factors, fixed, eliminated, dropped

    def optimize(self) -> BaOutcome:
        values, factors, fixed, eliminated, dropped = self.build_problem()
        self.dropped_constraints += dropped
        opts = SolveOptions(max_iterations=self.config.max_iterations)
        new_values, report = solve(values, factors, fixed=fixed, eliminated=eliminated, options=opts)
        skips = sum(getattr(f, "skipped", 0) for f in factors)
        self.behind_camera += skips

        for kf in self.window:
            kf.nav_state.pose = new_values[("pose", kf.kf_id)]
            kf.nav_state.velocity = new_values[("vel", kf.kf_id)].copy()
            bias = new_values[("bias", kf.kf_id)]
            kf.nav_state.bias_accel = bias[:3].copy()
            kf.nav_state.bias_gyro = bias[3:].copy()
        for key, val in new_values.items():
            if key[0] == "pt":
                self.points[key[1]].position = val.copy()

        newest = self.window[-1].nav_state
        self.current = newest.copy()
        self.last_report = report
        return BaOutcome(report, dropped, skips, len(eliminated))

    # ------------------------------------------------------------------
    # sparsifier interface

    def inertial_factors(self):
        """The blanket factor list: preintegration + bias factors only.

        Cloud-feedback constraints are never part of this list, so the
        information they carry is not re-packed into the uplink.
        """
        factors = []
        for a, b in zip(self.window[:-1], self.window[1:]):
            factors.append(
                PreintFactor(
                    ("pose", a.kf_id),
                    ("vel", a.kf_id),
                    ("bias", a.kf_id),
                    ("pose", b.kf_id),
                    ("vel", b.kf_id),
                    a.preint_to_next,
                    self.gravity,
                    robust=None,
                )
            )
            factors.append(
                BiasFactor(("bias", a.kf_id), ("bias", b.kf_id), a.preint_to_next.bias_info, robust=None)
            )
        assert all(
            type(f).__name__ in ("PreintFactor", "BiasFactor") for f in factors
        ), "cloud constraints must not enter the sparsifier input"
        return factors

    def window_values(self) -> dict:
        values = {}
        for kf in self.window:
            values[("pose", kf.kf_id)] = kf.nav_state.pose
            values[("vel", kf.kf_id)] = kf.nav_state.velocity.copy()
            values[("bias", kf.kf_id)] = np.concatenate(
                [kf.nav_state.bias_accel, kf.nav_state.bias_gyro]
            )
        return values
