"""Shared state and measurement value types.

All of these are plain value objects: freely copyable, no interior
mutation expected once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .se3 import Pose

BIAS_SANITY_BOUND = 2.0  # |b_a| m/s^2 and |b_g| rad/s above this are rejected


@dataclass
class NavState:
    """Pose + velocity + IMU biases at a timestamp (the VIO node payload)."""

    timestamp: float
    pose: Pose
    velocity: np.ndarray
    bias_accel: np.ndarray
    bias_gyro: np.ndarray

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).copy()
        self.bias_accel = np.asarray(self.bias_accel, dtype=float).copy()
        self.bias_gyro = np.asarray(self.bias_gyro, dtype=float).copy()

    def validate(self, bias_bound: float = BIAS_SANITY_BOUND) -> None:
        if not np.isfinite(self.timestamp) or self.timestamp < 0.0:
            raise ConfigError(f"bad NavState timestamp {self.timestamp}")
        if np.linalg.norm(self.bias_accel) > bias_bound or np.linalg.norm(self.bias_gyro) > bias_bound:
            raise ConfigError("NavState bias magnitude above sanity bound")

    def copy(self) -> "NavState":
        return NavState(
            self.timestamp,
            self.pose.copy(),
            self.velocity,
            self.bias_accel,
            self.bias_gyro,
        )


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray
    linear_acceleration: np.ndarray


@dataclass
class PixelObservation:
    """One landmark observation: (point, keyframe, pixel, 2x2 information)."""

    point_id: int
    keyframe_id: int
    pixel: np.ndarray
    info: np.ndarray

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float)
        self.info = np.asarray(self.info, dtype=float)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def check_info_matrix(m: np.ndarray, sym_tol: float = 1e-10, psd_tol: float = 1e-9) -> np.ndarray:
    """Validate symmetry and positive semidefiniteness of an information matrix.

    Returns the symmetrized matrix; raises ConfigError when the invariants
    are violated beyond tolerance (min eigenvalue >= -psd_tol * max eigenvalue).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"information matrix must be square, got {m.shape}")
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if asym > sym_tol * scale:
        raise ConfigError(f"information matrix asymmetry {asym:.3e}")
    ms = symmetrize(m)
    eig = np.linalg.eigvalsh(ms)
    if eig[0] < -psd_tol * max(eig[-1], 1.0):
        raise ConfigError(f"information matrix not PSD, min eig {eig[0]:.3e}")
    return ms


def is_psd(m: np.ndarray, tol: float = 1e-9) -> bool:
    eig = np.linalg.eigvalsh(symmetrize(np.asarray(m, dtype=float)))
    return bool(eig[0] >= -tol * max(abs(eig[-1]), 1.0))
