"""Window sparsification: marginalize velocity/bias, recover chain edges.

The velocity and bias nodes interact only with keyframe poses (their Markov
blanket contains no visual points), so marginalizing them is exact inside
the blanket.  The dense marginal information over the kept poses is then
approximated by a chain of binary virtual-odometry edges whose block
information matrices are the KL-closest block-diagonal fit: with the chain
measurement Jacobian A, each block is the inverse of the corresponding
diagonal block of A Lambda_t^{-1} A^T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularBlock, SingularInformation, SingularJacobian
from .factors import relative_transform_residual
from .messages import SubmapKeyframe, SubmapMessage, SubmapPoint, VirtualOdometryEdge
from .se3 import Pose
from .types import symmetrize

log = logging.getLogger(__name__)

RRR_REGULARIZATION = 1e-9
CONDITION_LIMIT = 1e12


@dataclass
class LinearizedFactor:
    keys: tuple
    jacobians: dict
    info: np.ndarray


@dataclass
class MarkovBlanket:
    """Linearized inertial subgraph around the velocity/bias nodes.

    The oldest keyframe's full state (pose, velocity, bias) is fixed, which
    is what makes the assembled information invertible.  `kept` and
    `removed` list the remaining variable labels in assembly order.
    """

    kept: list  # pose labels, oldest excluded
    removed: list  # velocity and bias labels, oldest excluded
    fixed: list
    factors: list  # list[LinearizedFactor]
    linearization: dict  # label -> value at the linearization point

    def dims(self) -> dict:
        out = {}
        for key in self.kept + self.removed:
            out[key] = 6 if key[0] in ("pose", "bias") else 3
        return out


def blanket_from_window(vio) -> MarkovBlanket:
    """Linearize the window's inertial factors at the current estimates."""
    values = vio.window_values()
    ids = [kf.kf_id for kf in vio.window]
    oldest = ids[0]
    kept = [("pose", i) for i in ids[1:]]
    removed = [("vel", i) for i in ids[1:]] + [("bias", i) for i in ids[1:]]
    fixed = [("pose", oldest), ("vel", oldest), ("bias", oldest)]

    lin_factors = []
    for f in vio.inertial_factors():
        for blk in f.blocks(values):
            assert not any(k[0] == "pt" for k in blk.jacobians), "points in blanket"
            lin_factors.append(LinearizedFactor(tuple(blk.jacobians), dict(blk.jacobians), blk.info))
    return MarkovBlanket(kept, removed, fixed, lin_factors, values)


def assemble_information(blanket: MarkovBlanket):
    """Lambda_m = sum J^T Lambda J over the blanket factors.

    Returns (Lambda_m, index) with `index` mapping each non-fixed label to
    its slice; fixed labels simply contribute no columns.
    """
    dims = blanket.dims()
    order = blanket.kept + blanket.removed
    index, off = {}, 0
    for key in order:
        index[key] = slice(off, off + dims[key])
        off += dims[key]
    lam = np.zeros((off, off))
    for f in blanket.factors:
        items = [(k, j) for k, j in f.jacobians.items() if k in index]
        for k1, j1 in items:
            jw = j1.T @ f.info
            for k2, j2 in items:
                lam[index[k1], index[k2]] += jw @ j2
    lam = symmetrize(lam)
    if off and np.linalg.cond(lam) > CONDITION_LIMIT:
        raise SingularInformation(
            f"blanket information condition number {np.linalg.cond(lam):.3e}"
        )
    return lam, index


def schur_marginalize(lam: np.ndarray, kept_idx: np.ndarray, removed_idx: np.ndarray) -> np.ndarray:
    """Lambda_t = Lambda_ss - Lambda_sr Lambda_rr^-1 Lambda_sr^T."""
    kept_idx = np.asarray(kept_idx, dtype=int)
    removed_idx = np.asarray(removed_idx, dtype=int)
    lam_ss = lam[np.ix_(kept_idx, kept_idx)]
    if removed_idx.size == 0:
        return symmetrize(lam_ss)
    lam_sr = lam[np.ix_(kept_idx, removed_idx)]
    lam_rr = lam[np.ix_(removed_idx, removed_idx)]
    try:
        sol = np.linalg.solve(lam_rr, lam_sr.T)
    except np.linalg.LinAlgError:
        sol = None
    if sol is None or not np.isfinite(sol).all():
        log.warning("Lambda_rr singular; regularizing with %g on the diagonal", RRR_REGULARIZATION)
        try:
            sol = np.linalg.solve(
                lam_rr + RRR_REGULARIZATION * np.eye(lam_rr.shape[0]), lam_sr.T
            )
        except np.linalg.LinAlgError as exc:
            raise SingularBlock("removed-block inversion failed") from exc
        if not np.isfinite(sol).all():
            raise SingularBlock("removed-block inversion produced non-finite values")
    return symmetrize(lam_ss - lam_sr @ sol)


def kl_block_diagonal(lam_t: np.ndarray, A: np.ndarray, block: int = 6) -> list:
    """KL-optimal block-diagonal recovery: X_i = ((A Lambda_t^-1 A^T)_ii)^-1."""
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= sv[0] / CONDITION_LIMIT:
        raise SingularJacobian("virtual-odometry Jacobian is numerically singular")
    cov_y = A @ np.linalg.solve(lam_t, A.T)
    n = A.shape[0] // block
    blocks = []
    for i in range(n):
        sl = slice(i * block, (i + 1) * block)
        blocks.append(symmetrize(np.linalg.inv(symmetrize(cov_y[sl, sl]))))
    return blocks


def virtual_odometry_jacobian(poses: list, fixed_first: bool = True):
    """Measurement Jacobian A of the chain h_i = log(T_i^-1 T_{i+1}).

    `poses` covers the whole window including the fixed oldest pose; columns
    span the non-fixed poses in window order.  Also returns the chain
    measurements (the current relative poses).
    """
    l = len(poses)
    n_edges = l - 1
    free = list(range(1, l)) if fixed_first else list(range(l))
    col = {idx: i * 6 for i, idx in enumerate(free)}
    A = np.zeros((6 * n_edges, 6 * len(free)))
    measurements = []
    for e in range(n_edges):
        rel = poses[e].inverse().compose(poses[e + 1])
        measurements.append(rel)
        _, j_i, j_j = relative_transform_residual(poses[e], poses[e + 1], rel)
        row = slice(6 * e, 6 * e + 6)
        if e in col:
            A[row, col[e] : col[e] + 6] = j_i
        A[row, col[e + 1] : col[e + 1] + 6] = j_j
    return A, measurements


def select_points(points: dict, theta: int) -> list:
    """Keep point ids observed strictly more than theta times."""
    return sorted(
        pid for pid, pt in points.items() if pt.observation_count > theta and pt.initialized
    )


def sparsify_window(vio, robot_id: int, sequence: int) -> SubmapMessage:
    """Full pipeline: blanket -> Lambda_m -> Lambda_t -> X_i -> SubmapMessage."""
    blanket = blanket_from_window(vio)
    lam_m, index = assemble_information(blanket)
    kept_idx = np.concatenate([np.arange(index[k].start, index[k].stop) for k in blanket.kept])
    removed_idx = np.concatenate(
        [np.arange(index[k].start, index[k].stop) for k in blanket.removed]
    )
    lam_t = schur_marginalize(lam_m, kept_idx, removed_idx)

    poses = [kf.nav_state.pose for kf in vio.window]
    A, measurements = virtual_odometry_jacobian(poses, fixed_first=True)
    blocks = kl_block_diagonal(lam_t, A)

    edges = [
        VirtualOdometryEdge(vio.window[e].kf_id, vio.window[e + 1].kf_id, measurements[e], blocks[e])
        for e in range(len(measurements))
    ]
    kept_points = select_points(vio.points, vio.config.theta)
    kept_set = set(kept_points)
    keyframes = [
        SubmapKeyframe(kf.kf_id, kf.nav_state.timestamp, kf.nav_state.pose) for kf in vio.window
    ]
    points = [SubmapPoint(pid, vio.points[pid].position.copy()) for pid in kept_points]
    observations = [
        o for kf in vio.window for o in kf.observations if o.point_id in kept_set
    ]
    return SubmapMessage(robot_id, sequence, keyframes, edges, points, observations)
