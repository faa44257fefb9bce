"""Synthetic ground truth: trajectories, landmark walls, laser map, sensors.

The world is a set of planar wall patches scattered along a smooth
gravity-aligned trajectory.  Visual landmarks are sparse samples of the
patches; the laser map is a dense (optionally noisy) resampling of the same
patches, so every visual point has a true map correspondence and a true
surface normal.  All generation is driven by `numpy.random.Generator`
streams derived from the config seed, so outputs are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCamera, ConfigError
from .camera import PinholeCamera
from .se3 import Pose, yaw_pose
from .types import ImuSample, PixelObservation

GRAVITY_W = np.array([0.0, 0.0, -9.81])

# Unit-scale Gerono lemniscate arclength, used to size figure-eight paths.
_GERONO_UNIT_LENGTH = None


@dataclass(frozen=True)
class NoiseConfig:
    gyro_noise_density: float = 1.7e-4  # rad/s/sqrt(Hz)
    accel_noise_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 2.0e-5  # rad/s/sqrt(s)
    accel_bias_walk: float = 3.0e-4  # m/s^2/sqrt(s)
    pixel_sigma: float = 1.0  # px
    map_point_sigma: float = 0.01  # m

    def validate(self) -> None:
        for name in (
            "gyro_noise_density",
            "accel_noise_density",
            "gyro_bias_walk",
            "accel_bias_walk",
            "pixel_sigma",
            "map_point_sigma",
        ):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"noise.{name} must be nonnegative")

    def zeroed(self) -> "NoiseConfig":
        return NoiseConfig(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


TRAJECTORY_KINDS = ("circle", "figure-eight", "corridor")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    trajectory_kind: str = "circle"
    path_length: float = 100.0
    speed: float = 2.0
    landmark_count: int = 400
    visibility_radius: float = 12.0
    imu_rate: float = 200.0
    frame_rate: float = 10.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    map_point_spacing: float = 0.15

    def validate(self) -> None:
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory_kind {self.trajectory_kind!r}")
        if self.imu_rate <= 0.0 or self.frame_rate <= 0.0:
            raise ConfigError("rates must be positive")
        if self.imu_rate < 10.0 * self.frame_rate:
            raise ConfigError("imu_rate must be at least 10x frame_rate")
        ratio = self.imu_rate / self.frame_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of frame_rate")
        if self.path_length <= 0.0 or self.speed <= 0.0:
            raise ConfigError("path_length and speed must be positive")
        if self.landmark_count <= 0:
            raise ConfigError("landmark_count must be positive")
        if self.visibility_radius < 5.0:
            raise ConfigError("visibility_radius must be at least 5 m")
        if self.map_point_spacing <= 0.0:
            raise ConfigError("map_point_spacing must be positive")
        self.noise.validate()


class _Trajectory:
    """Analytic gravity-aligned trajectory: position, derivatives, yaw."""

    def __init__(self, cfg: WorldConfig):
        self.kind = cfg.trajectory_kind
        self.duration = cfg.path_length / cfg.speed
        if self.kind == "circle":
            self.radius = cfg.path_length / (2.0 * np.pi)
            self.omega = cfg.speed / self.radius
        elif self.kind == "figure-eight":
            global _GERONO_UNIT_LENGTH
            if _GERONO_UNIT_LENGTH is None:
                u = np.linspace(0.0, 2.0 * np.pi, 200001)
                speed = np.sqrt(np.cos(u) ** 2 + np.cos(2.0 * u) ** 2)
                _GERONO_UNIT_LENGTH = float(np.trapezoid(speed, u))
            self.scale = cfg.path_length / _GERONO_UNIT_LENGTH
            self.u_rate = 2.0 * np.pi / self.duration
        else:
            self.speed = cfg.speed

    def sample(self, t: np.ndarray):
        """Returns (pos (N,3), vel (N,3), acc (N,3), yaw (N,), yaw_rate (N,))."""
        t = np.asarray(t, dtype=float)
        n = t.shape[0]
        pos = np.zeros((n, 3))
        vel = np.zeros((n, 3))
        acc = np.zeros((n, 3))
        if self.kind == "circle":
            th = self.omega * t
            r, w = self.radius, self.omega
            pos[:, 0], pos[:, 1] = r * np.cos(th), r * np.sin(th)
            vel[:, 0], vel[:, 1] = -r * w * np.sin(th), r * w * np.cos(th)
            acc[:, 0], acc[:, 1] = -r * w * w * np.cos(th), -r * w * w * np.sin(th)
            yaw = th + 0.5 * np.pi
            yaw_rate = np.full(n, w)
        elif self.kind == "figure-eight":
            u = self.u_rate * t
            a, du = self.scale, self.u_rate
            pos[:, 0], pos[:, 1] = a * np.sin(u), 0.5 * a * np.sin(2.0 * u)
            vel[:, 0], vel[:, 1] = a * du * np.cos(u), a * du * np.cos(2.0 * u)
            acc[:, 0], acc[:, 1] = -a * du * du * np.sin(u), -2.0 * a * du * du * np.sin(2.0 * u)
            yaw = np.arctan2(vel[:, 1], vel[:, 0])
            sq = vel[:, 0] ** 2 + vel[:, 1] ** 2
            yaw_rate = (vel[:, 0] * acc[:, 1] - vel[:, 1] * acc[:, 0]) / sq
        else:  # corridor
            pos[:, 0] = self.speed * t
            vel[:, 0] = self.speed
            yaw = np.zeros(n)
            yaw_rate = np.zeros(n)
        return pos, vel, acc, yaw, yaw_rate


@dataclass
class GroundTruth:
    """Sampled truth at IMU rate plus the static world geometry."""

    config: WorldConfig
    times: np.ndarray  # (N,)
    quats: np.ndarray  # (N, 4) wxyz, T^W_B rotation
    positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    bias_accel: np.ndarray  # (N, 3)
    bias_gyro: np.ndarray  # (N, 3)
    yaw_rates: np.ndarray  # (N,)
    accels_w: np.ndarray  # (N, 3) true linear acceleration in W
    landmarks: np.ndarray  # (L, 3)
    map_points: np.ndarray  # (M, 3)
    map_normals: np.ndarray  # (M, 3) unit
    frame_times: np.ndarray  # (F,)
    frame_imu_index: np.ndarray  # (F,) index into the IMU-rate arrays

    def pose(self, k: int) -> Pose:
        return Pose(self.quats[k], self.positions[k])

    def index_of_time(self, t: float) -> int:
        k = int(round(t * self.config.imu_rate))
        if abs(self.times[k] - t) > 0.5 / self.config.imu_rate:
            raise ConfigError(f"time {t} not on the IMU grid")
        return k

    def first_pose(self) -> Pose:
        """True T^W_O: the VIO origin is the first body pose."""
        return self.pose(0)


def _build_patches(cfg: WorldConfig, traj: _Trajectory, rng: np.random.Generator):
    n_patches = max(6, int(round(cfg.path_length / 4.0)))
    s = (np.arange(n_patches) + 0.5) * (cfg.path_length / n_patches)
    t = s / cfg.speed
    pos, _, _, yaw, _ = traj.sample(t)
    half_u, half_v = 2.0, 1.25
    margin = float(np.hypot(half_u, half_v)) + 0.4
    lo = min(3.0, 0.3 * cfg.visibility_radius)
    hi = max(lo + 0.5, min(0.55 * cfg.visibility_radius, cfg.visibility_radius - margin))
    min_separation = 2.0 * half_u + 0.8  # keeps wall neighborhoods single-plane
    patches = []
    centers = []
    for i in range(n_patches):
        left = np.array([-np.sin(yaw[i]), np.cos(yaw[i]), 0.0])
        z = rng.uniform(0.8, 1.6)
        best = None
        # curved paths can fold the corridor onto itself; resample until the
        # patch clears every earlier one (or keep the farthest attempt)
        for attempt in range(8):
            side = 1.0 if (i + attempt) % 2 == 0 else -1.0
            dist = rng.uniform(lo, hi)
            center = pos[i] + side * dist * left + np.array([0.0, 0.0, z])
            sep = (
                min(np.linalg.norm(center - c) for c in centers) if centers else np.inf
            )
            if best is None or sep > best[0]:
                best = (sep, side, center)
            if sep >= min_separation:
                break
        _, side, center = best
        centers.append(center)
        tilt = rng.uniform(-0.35, 0.35)
        ct, st = np.cos(tilt), np.sin(tilt)
        rot_z = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
        normal = rot_z @ (-side * left)
        u_axis = np.cross(np.array([0.0, 0.0, 1.0]), normal)
        u_axis /= np.linalg.norm(u_axis)
        v_axis = np.cross(normal, u_axis)
        patches.append((center, normal, u_axis, v_axis, half_u, half_v))
    return patches


def generate_world(config: WorldConfig) -> GroundTruth:
    """Build the full deterministic ground truth for one config."""
    config.validate()
    traj = _Trajectory(config)
    dt = 1.0 / config.imu_rate
    n = int(round(traj.duration * config.imu_rate)) + 1
    times = np.arange(n) * dt
    pos, vel, acc, yaw, yaw_rate = traj.sample(times)
    half = 0.5 * yaw
    quats = np.stack([np.cos(half), np.zeros(n), np.zeros(n), np.sin(half)], axis=1)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng_geom = np.random.default_rng(seeds[0])
    rng_bias = np.random.default_rng(seeds[1])

    patches = _build_patches(config, traj, rng_geom)

    landmarks = np.zeros((config.landmark_count, 3))
    for j in range(config.landmark_count):
        center, _, u_axis, v_axis, hu, hv = patches[j % len(patches)]
        a = rng_geom.uniform(-hu, hu)
        b = rng_geom.uniform(-hv, hv)
        landmarks[j] = center + a * u_axis + b * v_axis

    map_pts, map_nrm = [], []
    for center, normal, u_axis, v_axis, hu, hv in patches:
        us = np.arange(-hu, hu + 1e-9, config.map_point_spacing)
        vs = np.arange(-hv, hv + 1e-9, config.map_point_spacing)
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        grid = center + uu[..., None] * u_axis + vv[..., None] * v_axis
        grid = grid.reshape(-1, 3)
        if config.noise.map_point_sigma > 0.0:
            grid = grid + rng_geom.normal(0.0, config.noise.map_point_sigma, grid.shape)
        map_pts.append(grid)
        map_nrm.append(np.tile(normal, (grid.shape[0], 1)))
    map_points = np.concatenate(map_pts, axis=0)
    map_normals = np.concatenate(map_nrm, axis=0)

    # bias random walk, starting from zero
    bias_accel = np.zeros((n, 3))
    bias_gyro = np.zeros((n, 3))
    if config.noise.accel_bias_walk > 0.0:
        steps = rng_bias.normal(0.0, config.noise.accel_bias_walk * np.sqrt(dt), (n - 1, 3))
        bias_accel[1:] = np.cumsum(steps, axis=0)
    if config.noise.gyro_bias_walk > 0.0:
        steps = rng_bias.normal(0.0, config.noise.gyro_bias_walk * np.sqrt(dt), (n - 1, 3))
        bias_gyro[1:] = np.cumsum(steps, axis=0)

    stride = int(round(config.imu_rate / config.frame_rate))
    frame_imu_index = np.arange(0, n, stride)
    frame_times = times[frame_imu_index]

    return GroundTruth(
        config=config,
        times=times,
        quats=quats,
        positions=pos,
        velocities=vel,
        bias_accel=bias_accel,
        bias_gyro=bias_gyro,
        yaw_rates=yaw_rate,
        accels_w=acc,
        landmarks=landmarks,
        map_points=map_points,
        map_normals=map_normals,
        frame_times=frame_times,
        frame_imu_index=frame_imu_index,
    )


def synth_imu(truth: GroundTruth, noise: NoiseConfig, seed: int) -> list[ImuSample]:
    """Noisy body-frame IMU stream at the truth's IMU rate.

    accel = R^B_W (a^W - g^W) + b_a + white noise, gyro analogous.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = truth.times.shape[0]
    rate = truth.config.imu_rate
    yaw = 2.0 * np.arctan2(truth.quats[:, 3], truth.quats[:, 0])
    c, s = np.cos(yaw), np.sin(yaw)
    spec = truth.accels_w - GRAVITY_W  # specific force in W
    accel_b = np.stack(
        [
            c * spec[:, 0] + s * spec[:, 1],
            -s * spec[:, 0] + c * spec[:, 1],
            spec[:, 2],
        ],
        axis=1,
    )
    gyro_b = np.zeros((n, 3))
    gyro_b[:, 2] = truth.yaw_rates

    accel = accel_b + truth.bias_accel
    gyro = gyro_b + truth.bias_gyro
    if noise.accel_noise_density > 0.0:
        accel = accel + rng.normal(0.0, noise.accel_noise_density * np.sqrt(rate), (n, 3))
    if noise.gyro_noise_density > 0.0:
        gyro = gyro + rng.normal(0.0, noise.gyro_noise_density * np.sqrt(rate), (n, 3))

    return [ImuSample(float(truth.times[k]), gyro[k], accel[k]) for k in range(n)]


@dataclass
class Frame:
    index: int
    timestamp: float
    observations: list  # list[PixelObservation], keyframe_id == frame index


def synth_frames(
    truth: GroundTruth,
    camera: PinholeCamera,
    t_cb: Pose,
    noise: NoiseConfig,
    seed: int,
) -> list[Frame]:
    """Per-frame pixel observations with perfect (true-id) association."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sigma = noise.pixel_sigma
    info = np.eye(2) / max(sigma, 1e-3) ** 2
    frames = []
    lms = truth.landmarks
    for fi, k in enumerate(truth.frame_imu_index):
        body = truth.pose(int(k))
        cam_pose = t_cb.compose(body.inverse())  # T^C_W
        rel = lms - body.t
        in_range = np.einsum("ij,ij->i", rel, rel) <= truth.config.visibility_radius**2
        obs = []
        if np.any(in_range):
            ids = np.nonzero(in_range)[0]
            pts_c = cam_pose.act(lms[ids])
            uv, valid = camera.project_many(pts_c)
            ok = valid & camera.contains_many(np.nan_to_num(uv, nan=-1.0))
            for j in np.nonzero(ok)[0]:
                px = uv[j]
                if sigma > 0.0:
                    px = px + rng.normal(0.0, sigma, 2)
                obs.append(PixelObservation(int(ids[j]), fi, px, info))
        frames.append(Frame(fi, float(truth.times[k]), obs))
    return frames
