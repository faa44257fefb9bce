"""Cloud subsystem: submap database, map association, long-window localization.

Each robot gets an isolated session holding its T^W_O anchor and the
accumulated keyframe/point/edge database.  Localization optimizes the L
most recent keyframes against the laser map with ICP-style re-association
every epoch, then refreshes T^W_O from the newest optimized pose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .errors import ConfigError, StaleMessage
from .factors import (
    PointToPlaneFactor,
    PointToPointFactor,
    RelativeTransformFactor,
    ReprojectionSet,
    relative_transform_residual,
)
from .camera import PinholeCamera
from .messages import (
    CloudResultMessage,
    ResultPoint,
    ResultRelativeTransform,
    SubmapMessage,
)
from .se3 import Pose
from .solver import SolveOptions, assemble_normal_matrix, solve
from .types import symmetrize

log = logging.getLogger(__name__)

MAP_SIGMA_FLOOR = 1e-6


@dataclass
class CloudConfig:
    window_size: int = 40  # L
    feedback_window: int = 10  # l, matches the robot window
    association_radius: float = 1.0  # m
    planarity_neighbors: int = 10
    planarity_ratio: float = 0.01
    min_map_factors: int = 10
    feedback_info_scale: float = 1.0
    stale_horizon: int = 40  # sequences
    max_assoc_epochs: int = 5
    solver_iterations: int = 10


class LaserMap:
    """Prior point cloud with per-point normals and a KD-tree index.

    Neighborhood planarity (smallest/largest covariance eigenvalue ratio
    below `planarity_ratio` over the k nearest neighbors) is precomputed
    per map point and decides point-to-plane vs point-to-point association.
    """

    def __init__(self, points, normals, sigma, planarity_neighbors=10, planarity_ratio=0.01):
        self.points = np.asarray(points, dtype=float)
        self.normals = np.asarray(normals, dtype=float)
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ConfigError("map normals must be unit length")
        self.sigma = max(float(sigma), MAP_SIGMA_FLOOR)
        self.tree = cKDTree(self.points)
        k = min(planarity_neighbors, len(self.points))
        dist, idx = self.tree.query(self.points, k=k)
        nbrs = self.points[idx]  # (M, k, 3)
        centered = nbrs - nbrs.mean(axis=1, keepdims=True)
        cov = np.einsum("mki,mkj->mij", centered, centered) / k
        eig = np.linalg.eigvalsh(cov)
        self.planar = eig[:, 0] < planarity_ratio * np.maximum(eig[:, 2], 1e-300)
        # a sampled map quantizes point-to-point matches by half the sample
        # spacing; fold that into the ptp noise so discrete sampling does not
        # masquerade as surveying accuracy
        spacing = float(np.median(dist[:, 1])) if k > 1 else 0.0
        self.sigma_point = float(np.sqrt(self.sigma**2 + 0.25 * spacing**2))

    @classmethod
    def from_world(cls, truth, planarity_neighbors=10, planarity_ratio=0.01) -> "LaserMap":
        return cls(
            truth.map_points,
            truth.map_normals,
            truth.config.noise.map_point_sigma,
            planarity_neighbors,
            planarity_ratio,
        )

    def associate_many(self, queries: np.ndarray, radius: float):
        """Nearest map point per query; indices are -1 outside the radius."""
        if queries.size == 0:
            return np.empty(0, dtype=int)
        dist, idx = self.tree.query(queries)
        out = np.where(dist <= radius, idx, -1)
        return out


@dataclass
class Association:
    point_id: int
    map_index: int
    kind: str  # "point-to-plane" | "point-to-point"
    info: np.ndarray


def associate(point: np.ndarray, laser_map: LaserMap, radius: float) -> Association | None:
    """Single-point association; None when no map point is within radius."""
    idx = laser_map.associate_many(np.asarray(point, dtype=float).reshape(1, 3), radius)[0]
    if idx < 0:
        return None
    if laser_map.planar[idx]:
        return Association(-1, int(idx), "point-to-plane", np.array([[1.0 / laser_map.sigma**2]]))
    return Association(-1, int(idx), "point-to-point", np.eye(3) / laser_map.sigma_point**2)


@dataclass
class KfRecord:
    kf_id: int
    timestamp: float
    pose_w: Pose
    pose_o: Pose
    sequence: int


@dataclass
class PtRecord:
    point_id: int
    position_w: np.ndarray
    sequence: int


@dataclass
class RobotSession:
    robot_id: int
    t_wo: Pose
    t_wo_time: float = 0.0
    kf_db: dict = field(default_factory=dict)  # id -> KfRecord
    pt_db: dict = field(default_factory=dict)  # id -> PtRecord
    obs_db: dict = field(default_factory=dict)  # (pid, kfid) -> PixelObservation
    edge_db: dict = field(default_factory=dict)  # (i, j) -> [Pose, info, seq]
    last_sequence: int = -1
    stale_dropped: int = 0
    cycles: int = 0


def ingest_submap(session: RobotSession, msg: SubmapMessage, stale_horizon: int) -> None:
    """Register or update keyframes, points, edges and observations.

    States arrive in the VIO frame and are anchored into W with the
    session's current T^W_O; edge information matrices are conjugated by
    R^W_O on both sides.  Ids already updated by a newer sequence are left
    alone, so late out-of-order submaps only fill gaps.
    """
    if session.last_sequence - msg.sequence > stale_horizon:
        session.stale_dropped += 1
        raise StaleMessage(
            f"sequence {msg.sequence} older than horizon (last {session.last_sequence})"
        )
    t_wo = session.t_wo
    R = t_wo.R
    B = np.zeros((6, 6))
    B[:3, :3] = R
    B[3:, 3:] = R

    for kf in msg.keyframes:
        rec = session.kf_db.get(kf.kf_id)
        if rec is not None and rec.sequence >= msg.sequence:
            continue
        session.kf_db[kf.kf_id] = KfRecord(
            kf.kf_id, kf.timestamp, t_wo.compose(kf.pose), kf.pose, msg.sequence
        )
    for pt in msg.points:
        rec = session.pt_db.get(pt.point_id)
        if rec is not None and rec.sequence >= msg.sequence:
            continue
        session.pt_db[pt.point_id] = PtRecord(pt.point_id, t_wo.act(pt.position), msg.sequence)
    for e in msg.virtual_odometry:
        key = (e.from_kf, e.to_kf)
        rec = session.edge_db.get(key)
        if rec is not None and rec[2] >= msg.sequence:
            continue
        session.edge_db[key] = [e.measurement, symmetrize(B @ e.info @ B.T), msg.sequence]
    for o in msg.observations:
        session.obs_db.setdefault((o.point_id, o.keyframe_id), o)
    session.last_sequence = max(session.last_sequence, msg.sequence)


@dataclass
class LocalizeOutcome:
    window_ids: list
    values: dict
    factors: list
    n_point_to_plane: int = 0
    n_point_to_point: int = 0
    low_confidence: bool = True
    assoc_stable: bool = False
    assoc_epochs: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    iterations: int = 0
    full_rank: bool | None = None


class CloudLocalizer:
    def __init__(self, laser_map: LaserMap, camera: PinholeCamera, t_cb: Pose, config: CloudConfig):
        self.map = laser_map
        self.camera = camera
        self.t_cb = t_cb
        self.config = config

    # ------------------------------------------------------------------

    def _window_ids(self, session: RobotSession, latest_kf_id: int) -> list:
        ids = sorted(i for i in session.kf_db if i <= latest_kf_id)
        return ids[-self.config.window_size :]

    def _build_static_problem(self, session: RobotSession, window_ids: list):
        values, factors = {}, []
        win = set(window_ids)
        # a point needs two in-window views to be a well-posed node
        seen: dict = {}
        for pid, kid in session.obs_db:
            if kid in win and pid in session.pt_db:
                seen[pid] = seen.get(pid, 0) + 1
        point_ids = sorted(pid for pid, n in seen.items() if n >= 2)
        for i in window_ids:
            values[("pose", i)] = session.kf_db[i].pose_w
        for pid in point_ids:
            values[("pt", pid)] = session.pt_db[pid].position_w.copy()
        pts_set = set(point_ids)

        by_kf: dict = {i: [] for i in window_ids}
        for (pid, kid), o in session.obs_db.items():
            if kid in win and pid in pts_set:
                by_kf[kid].append(o)
        for i in window_ids:
            obs = by_kf[i]
            if obs:
                factors.append(
                    ReprojectionSet(
                        ("pose", i),
                        [("pt", o.point_id) for o in obs],
                        [o.pixel for o in obs],
                        [o.info for o in obs],
                        self.camera,
                        self.t_cb,
                    )
                )
        for (i, j), (meas, info, _) in session.edge_db.items():
            if i in win and j in win:
                factors.append(RelativeTransformFactor(("pose", i), ("pose", j), meas, info))
        return values, factors, point_ids

    def _map_factors(self, values: dict, point_ids: list):
        """Associate every window point; returns (factors, assoc key, counts)."""
        if not point_ids:
            return [], (), 0, 0
        pts = np.stack([values[("pt", pid)] for pid in point_ids])
        idx = self.map.associate_many(pts, self.config.association_radius)
        w_plane = 1.0 / self.map.sigma**2
        w_point = np.eye(3) / self.map.sigma_point**2
        factors, n_plane, n_point = [], 0, 0
        for pid, mi in zip(point_ids, idx):
            if mi < 0:
                continue
            if self.map.planar[mi]:
                factors.append(
                    PointToPlaneFactor(("pt", pid), self.map.points[mi], self.map.normals[mi], w_plane)
                )
                n_plane += 1
            else:
                factors.append(PointToPointFactor(("pt", pid), self.map.points[mi], w_point))
                n_point += 1
        return factors, tuple(idx), n_plane, n_point

    def localize(self, session: RobotSession, latest_kf_id: int) -> LocalizeOutcome:
        """Long-window optimization with per-epoch re-association.

        The oldest window state stays adjustable (no gauge fixing); the map
        factors anchor the problem whenever enough associations exist.
        """
        window_ids = self._window_ids(session, latest_kf_id)
        values, static_factors, point_ids = self._build_static_problem(session, window_ids)
        out = LocalizeOutcome(window_ids, values, static_factors)
        if len(window_ids) < 2:
            return out

        eliminated = {("pt", pid) for pid in point_ids}
        opts = SolveOptions(max_iterations=self.config.solver_iterations)
        prev_assoc = None
        first_cost = None
        map_factors: list = []
        n_plane = n_point = 0
        for epoch in range(self.config.max_assoc_epochs):
            out.assoc_epochs = epoch + 1
            map_factors, assoc, n_plane, n_point = self._map_factors(values, point_ids)
            stable = prev_assoc is not None and assoc == prev_assoc
            prev_assoc = assoc
            factors = static_factors + map_factors
            values, report = solve(values, factors, eliminated=eliminated, options=opts)
            if first_cost is None:
                first_cost = report.initial_cost
            out.final_cost = report.final_cost
            out.iterations += report.iterations
            if stable and report.converged:
                out.assoc_stable = True
                break
        out.initial_cost = first_cost if first_cost is not None else 0.0
        out.values = values
        out.factors = static_factors + map_factors
        out.n_point_to_plane = n_plane
        out.n_point_to_point = n_point
        out.low_confidence = (n_plane + n_point) < self.config.min_map_factors
        return out

    def commit(self, session: RobotSession, outcome: LocalizeOutcome, now: float) -> None:
        """Persist optimized states and refresh T^W_O (confident cycles only)."""
        if outcome.low_confidence:
            return
        for key, val in outcome.values.items():
            if key[0] == "pose":
                session.kf_db[key[1]].pose_w = val
            else:
                session.pt_db[key[1]].position_w = val.copy()
        newest = outcome.window_ids[-1]
        rec = session.kf_db[newest]
        session.t_wo = rec.pose_w.compose(rec.pose_o.inverse())
        session.t_wo_time = now

    # ------------------------------------------------------------------

    def build_result(self, session: RobotSession, outcome: LocalizeOutcome) -> CloudResultMessage:
        """Feedback for the latest l keyframes with marginal informations."""
        cfg = self.config
        tail = outcome.window_ids[-cfg.feedback_window :]
        H, _, index = assemble_normal_matrix(outcome.factors, outcome.values)
        n = H.shape[0]
        try:
            factor = cho_factor(H, lower=True)
        except np.linalg.LinAlgError:
            log.warning("normal matrix not positive definite; regularizing")
            reg = 1e-9 * max(float(np.max(np.diag(H))), 1.0)
            factor = cho_factor(H + reg * np.eye(n), lower=True)

        win = set(outcome.window_ids)
        tail_set = set(tail)
        point_ids = sorted(
            {
                pid
                for (pid, kid) in session.obs_db
                if kid in tail_set and ("pt", pid) in outcome.values
            }
        )
        cols_keys = [("pose", i) for i in tail] + [("pt", pid) for pid in point_ids]
        col_idx = np.concatenate(
            [np.arange(index[k].start, index[k].stop) for k in cols_keys]
        )
        rhs = np.zeros((n, col_idx.size))
        rhs[col_idx, np.arange(col_idx.size)] = 1.0
        cov_cols = cho_solve(factor, rhs)
        pos_of = {}
        off = 0
        for k in cols_keys:
            d = index[k].stop - index[k].start
            pos_of[k] = slice(off, off + d)
            off += d

        def marginal(key_a, key_b=None):
            block = cov_cols[index[key_a], :]
            if key_b is None:
                return block[:, pos_of[key_a]]
            return np.block(
                [
                    [block[:, pos_of[key_a]], block[:, pos_of[key_b]]],
                    [
                        cov_cols[index[key_b], :][:, pos_of[key_a]],
                        cov_cols[index[key_b], :][:, pos_of[key_b]],
                    ],
                ]
            )

        t_ow = session.t_wo.inverse()
        R_ow = t_ow.R
        B_ow = np.zeros((6, 6))
        B_ow[:3, :3] = R_ow
        B_ow[3:, 3:] = R_ow
        scale = cfg.feedback_info_scale

        rels = []
        for i, j in zip(tail[:-1], tail[1:]):
            pi, pj = outcome.values[("pose", i)], outcome.values[("pose", j)]
            meas = pi.inverse().compose(pj)
            _, j_i, j_j = relative_transform_residual(pi, pj, meas)
            J = np.hstack([j_i, j_j])
            cov_rel = J @ marginal(("pose", i), ("pose", j)) @ J.T
            info = scale * np.linalg.inv(symmetrize(cov_rel))
            rels.append(ResultRelativeTransform(i, j, meas, symmetrize(B_ow @ info @ B_ow.T)))

        pts = []
        for pid in point_ids:
            cov_p = symmetrize(marginal(("pt", pid)))
            info = scale * np.linalg.inv(cov_p)
            pts.append(
                ResultPoint(
                    pid,
                    t_ow.act(outcome.values[("pt", pid)]),
                    symmetrize(R_ow @ info @ R_ow.T),
                )
            )

        newest = tail[-1]
        pose = outcome.values[("pose", newest)]
        cov_pose = symmetrize(marginal(("pose", newest)))
        pose_info = scale * np.linalg.inv(cov_pose)
        return CloudResultMessage(
            robot_id=session.robot_id,
            sequence=session.last_sequence,
            latest_kf_id=newest,
            timestamp=session.kf_db[newest].timestamp,
            pose=pose,
            pose_info=symmetrize(pose_info),
            relative_transforms=rels,
            points=pts,
        )

    def normal_matrix_full_rank(self, outcome: LocalizeOutcome) -> bool:
        H, _, _ = assemble_normal_matrix(outcome.factors, outcome.values)
        try:
            cho_factor(H, lower=True)
            return True
        except np.linalg.LinAlgError:
            return False


class CloudServer:
    """Per-robot sessions sharing one immutable laser map."""

    def __init__(self, localizer: CloudLocalizer, t_wo_init):
        self.localizer = localizer
        self.t_wo_init = t_wo_init  # robot_id -> initial T^W_O guess
        self.sessions: dict = {}
        self.diagnostics: list = []
        self.stale_dropped = 0

    def session(self, robot_id: int) -> RobotSession:
        s = self.sessions.get(robot_id)
        if s is None:
            s = RobotSession(robot_id, self.t_wo_init[robot_id].copy())
            self.sessions[robot_id] = s
        return s

    def handle_submap(self, msg: SubmapMessage, now: float) -> CloudResultMessage | None:
        session = self.session(msg.robot_id)
        try:
            ingest_submap(session, msg, self.localizer.config.stale_horizon)
        except StaleMessage:
            self.stale_dropped += 1
            return None
        latest = max(kf.kf_id for kf in msg.keyframes)
        outcome = self.localizer.localize(session, latest)
        self.localizer.commit(session, outcome, now)
        session.cycles += 1
        t_wo_log = session.t_wo.log()
        self.diagnostics.append(
            {
                "time": now,
                "robot_id": msg.robot_id,
                "sequence": msg.sequence,
                "window": len(outcome.window_ids),
                "cost_initial": outcome.initial_cost,
                "cost_final": outcome.final_cost,
                "iterations": outcome.iterations,
                "assoc_epochs": outcome.assoc_epochs,
                "assoc_stable": outcome.assoc_stable,
                "n_point_to_plane": outcome.n_point_to_plane,
                "n_point_to_point": outcome.n_point_to_point,
                "low_confidence": outcome.low_confidence,
                "t_wo": [float(x) for x in t_wo_log],
                "t_wo_age": now - session.t_wo_time,
            }
        )
        if outcome.low_confidence:
            return None
        return self.localizer.build_result(session, outcome)
