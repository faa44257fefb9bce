"""Deterministic client-cloud visual-inertial localization simulator."""

from .se3 import Pose
from .types import ImuSample, NavState, PixelObservation

__all__ = ["Pose", "ImuSample", "NavState", "PixelObservation"]
__version__ = "0.1.0"
