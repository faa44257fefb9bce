"""Pinhole camera model (no distortion; synthetic world)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera
from .se3 import Pose


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    min_depth: float = 0.05

    def project(self, p: np.ndarray) -> np.ndarray:
        """Project a camera-frame point to pixels.

        Raises BehindCamera when the depth is at or below `min_depth`.
        """
        x, y, z = p
        if z <= self.min_depth:
            raise BehindCamera(f"depth {z:.4f} <= min_depth {self.min_depth}")
        return np.array([self.fx * x / z + self.cx, self.fy * y / z + self.cy])

    def project_jacobian(self, p: np.ndarray) -> np.ndarray:
        """d(pixel)/d(camera point), 2x3."""
        x, y, z = p
        iz = 1.0 / z
        return np.array(
            [
                [self.fx * iz, 0.0, -self.fx * x * iz * iz],
                [0.0, self.fy * iz, -self.fy * y * iz * iz],
            ]
        )

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection; returns (pixels (N,2), valid mask (N,)).

        Invalid rows (depth <= min_depth) are filled with NaN, not raised.
        """
        z = pts[:, 2]
        valid = z > self.min_depth
        uv = np.full((pts.shape[0], 2), np.nan)
        zs = np.where(valid, z, 1.0)
        uv[:, 0] = self.fx * pts[:, 0] / zs + self.cx
        uv[:, 1] = self.fy * pts[:, 1] / zs + self.cy
        uv[~valid] = np.nan
        return uv, valid

    def contains(self, uv: np.ndarray) -> bool:
        return bool(0.0 <= uv[0] < self.width and 0.0 <= uv[1] < self.height)

    def contains_many(self, uv: np.ndarray) -> np.ndarray:
        return (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < self.height)
        )


def forward_facing_extrinsic(offset: np.ndarray | None = None) -> Pose:
    """T^C_B for a camera looking along body +x.

    Camera axes: z forward, x right, y down; body axes: x forward, y left,
    z up.  `offset` is the body-frame camera position (lever arm).
    """
    R_cb = np.array(
        [
            [0.0, -1.0, 0.0],
            [0.0, 0.0, -1.0],
            [1.0, 0.0, 0.0],
        ]
    )
    t_b = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)
    # T^C_B maps body coords to camera coords: p_C = R_cb (p_B - t_b)
    return Pose.from_matrix(R_cb, -R_cb @ t_b)
