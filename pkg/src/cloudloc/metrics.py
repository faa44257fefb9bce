"""Absolute trajectory error, Sturm-style, without alignment.

Both trajectories live in the map frame W by construction, so a global
alignment step would mask exactly the drift this system is supposed to
correct; errors are plain per-pose translation distances after nearest
timestamp pairing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap

MIN_PAIRS = 10


@dataclass
class AteResult:
    median: float
    std: float
    times: np.ndarray
    errors: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))


def compute_ate(
    est_times: np.ndarray,
    est_positions: np.ndarray,
    gt_times: np.ndarray,
    gt_positions: np.ndarray,
    max_dt: float = 0.01,
) -> AteResult:
    """Pair poses by nearest timestamp within max_dt and report ||dt||.

    Raises NoOverlap when fewer than 10 pairs match.
    """
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    est_positions = np.asarray(est_positions, dtype=float)
    gt_positions = np.asarray(gt_positions, dtype=float)

    idx = np.searchsorted(gt_times, est_times)
    idx = np.clip(idx, 1, len(gt_times) - 1)
    left = gt_times[idx - 1]
    right = gt_times[idx]
    nearest = np.where(np.abs(est_times - left) <= np.abs(right - est_times), idx - 1, idx)
    dt = np.abs(gt_times[nearest] - est_times)
    ok = dt <= max_dt
    if int(np.sum(ok)) < MIN_PAIRS:
        raise NoOverlap(f"only {int(np.sum(ok))} matched pairs (need {MIN_PAIRS})")
    err = np.linalg.norm(est_positions[ok] - gt_positions[nearest[ok]], axis=1)
    return AteResult(
        median=float(np.median(err)),
        std=float(np.std(err)),
        times=est_times[ok],
        errors=err,
    )
