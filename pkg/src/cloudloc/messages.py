"""Robot<->cloud wire units and the client-side constraint view of them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose
from .types import PixelObservation


@dataclass
class VirtualOdometryEdge:
    """Binary relative-pose factor recovered by the sparsifier."""

    from_kf: int
    to_kf: int
    measurement: Pose
    info: np.ndarray  # 6x6


@dataclass
class SubmapKeyframe:
    kf_id: int
    timestamp: float
    pose: Pose  # T^O_B


@dataclass
class SubmapPoint:
    point_id: int
    position: np.ndarray  # p_v in O


@dataclass
class SubmapMessage:
    """Sparsified window sent robot -> cloud."""

    robot_id: int
    sequence: int
    keyframes: list  # list[SubmapKeyframe]
    virtual_odometry: list  # list[VirtualOdometryEdge]
    points: list  # list[SubmapPoint]
    observations: list  # list[PixelObservation], restricted to kept points
    byte_size: int | None = None  # filled at serialization


@dataclass
class ResultRelativeTransform:
    from_kf: int
    to_kf: int
    measurement: Pose  # T~^i_j
    info: np.ndarray  # Omega^rt, 6x6


@dataclass
class ResultPoint:
    point_id: int
    position: np.ndarray  # p~_v in O
    info: np.ndarray  # Omega^pt, 3x3


@dataclass
class CloudResultMessage:
    """Localization feedback cloud -> robot, restricted to the latest l keyframes."""

    robot_id: int
    sequence: int
    latest_kf_id: int
    timestamp: float
    pose: Pose  # localized T^W_B of the latest keyframe
    pose_info: np.ndarray  # 6x6 marginal information of that pose
    relative_transforms: list  # list[ResultRelativeTransform]
    points: list  # list[ResultPoint]
    byte_size: int | None = None


@dataclass
class CloudConstraintSet:
    """Cloud feedback reshaped as BA constraints (Eq.-style prior terms)."""

    relative_transforms: list = field(default_factory=list)  # ResultRelativeTransform
    point_priors: list = field(default_factory=list)  # ResultPoint

    @classmethod
    def from_result(cls, msg: CloudResultMessage) -> "CloudConstraintSet":
        return cls(list(msg.relative_transforms), list(msg.points))
