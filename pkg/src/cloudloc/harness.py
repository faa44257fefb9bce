"""End-to-end experiment orchestration on the simulated clock.

One run wires together: synthetic world -> client VIO + sparsifier -> uplink
channel -> cloud localizer -> downlink channel -> fusion EKF, all driven by
a single event heap.  Event order at equal timestamps is fixed (IMU, then
deliveries, then frames) so runs are bit-reproducible.
"""

from __future__ import annotations

import csv
import heapq
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import forward_facing_extrinsic
from .cloud import CloudConfig, CloudLocalizer, CloudServer, LaserMap
from .codec import decode_packet, encode_result, encode_submap
from .config import ExperimentConfig, config_to_parser
from .ekf import FusionEkf
from .errors import CloudlocError
from .messages import CloudConstraintSet
from .metrics import AteResult, compute_ate
from .netsim import DROPPED, Channel, write_traffic_csv
from .se3 import Pose, so3_exp
from .sparsifier import sparsify_window
from .types import NavState
from .vio import SlidingWindowVio
from .world import GRAVITY_W, generate_world, synth_frames, synth_imu

_EV_IMU = 0
_EV_DELIVER_UP = 1
_EV_DELIVER_DOWN = 2
_EV_FRAME = 3


@dataclass
class RunMetrics:
    ate_median: float
    ate_std: float
    ate_times: np.ndarray
    ate_errors: np.ndarray
    duration: float
    keyframes: int
    submaps_sent: int
    results_sent: int
    up_bytes: int
    down_bytes: int
    up_rate: float
    down_rate: float
    counters: dict
    cloud_diagnostics: list


def perturb_pose(pose: Pose, trans: float, rot_deg: float, seed: int) -> Pose:
    """Compose a deterministic random error of given magnitudes onto a pose."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    err = Pose(so3_exp(axis * np.deg2rad(rot_deg)), direction * trans)
    return err.compose(pose)


def run_experiment(cfg: ExperimentConfig, out_dir=None, truth=None) -> RunMetrics:
    """Execute one full experiment; optionally write artifacts to out_dir."""
    cfg.validate()
    if truth is None:
        truth = generate_world(cfg.world)
    noise = cfg.world.noise
    camera = cfg.camera.camera()
    t_cb = forward_facing_extrinsic(cfg.camera.offset())

    imu = synth_imu(truth, noise, cfg.imu_seed)
    frames = synth_frames(truth, camera, t_cb, noise, cfg.frame_seed)

    t_wo_true = truth.first_pose()
    t_wo_guess = perturb_pose(
        t_wo_true, cfg.anchor_error_trans, cfg.anchor_error_rot_deg, cfg.anchor_error_seed
    )
    gravity_o = t_wo_true.R.T @ GRAVITY_W
    v_o0 = t_wo_true.R.T @ truth.velocities[0]

    vio = SlidingWindowVio(
        cfg.vio,
        camera,
        t_cb,
        NavState(0.0, Pose.identity(), v_o0, np.zeros(3), np.zeros(3)),
        gravity_o,
        noise,
    )
    laser_map = LaserMap.from_world(
        truth, cfg.cloud.planarity_neighbors, cfg.cloud.planarity_ratio
    )
    localizer = CloudLocalizer(laser_map, camera, t_cb, cfg.cloud)
    cloud = CloudServer(localizer, {cfg.robot_id: t_wo_guess})
    ekf = FusionEkf(
        cfg.ekf,
        0.0,
        t_wo_guess,  # T^O_B(0) is the identity, so T^W_B(0) = T^W_O
        t_wo_guess.R @ v_o0,
        t_wo_guess,
        GRAVITY_W,
        noise,
    )
    up = Channel(cfg.up, "up")
    down = Channel(cfg.down, "down")

    heap = []
    seq = 0
    for s in imu:
        heapq.heappush(heap, (s.timestamp, _EV_IMU, seq, s))
        seq += 1
    for f in frames:
        heapq.heappush(heap, (f.timestamp, _EV_FRAME, seq, f))
        seq += 1

    est_times, est_positions = [], []
    submap_seq = 0
    keyframes = 0
    results_sent = 0

    while heap:
        now, kind, _, payload = heapq.heappop(heap)
        if kind == _EV_IMU:
            ekf.propagate(payload)
            vio.add_imu(payload)
            est_times.append(now)
            est_positions.append(ekf.pose_wb().t.copy())
        elif kind == _EV_FRAME:
            kf = vio.process_frame(payload)
            if kf is None:
                continue
            keyframes += 1
            ekf.update_odometry(kf.nav_state.timestamp, kf.nav_state.pose)
            if len(vio.window) >= 2:
                submap_seq += 1
                msg = sparsify_window(vio, cfg.robot_id, submap_seq)
                delivery = up.send(encode_submap(msg), now, "submap")
                if delivery is not DROPPED:
                    seq += 1
                    heapq.heappush(heap, (delivery.time, _EV_DELIVER_UP, seq, delivery.payload))
        elif kind == _EV_DELIVER_UP:
            msg = decode_packet(payload)
            result = cloud.handle_submap(msg, now)
            if result is not None:
                results_sent += 1
                delivery = down.send(encode_result(result), now, "result")
                if delivery is not DROPPED:
                    seq += 1
                    heapq.heappush(heap, (delivery.time, _EV_DELIVER_DOWN, seq, delivery.payload))
        else:  # _EV_DELIVER_DOWN
            msg = decode_packet(payload)
            vio.enqueue_cloud(CloudConstraintSet.from_result(msg))
            ekf.update_localization(msg.timestamp, msg.pose, msg.pose_info)

    est_times = np.asarray(est_times)
    est_positions = np.asarray(est_positions)
    ate = compute_ate(est_times, est_positions, truth.times, truth.positions)
    duration = float(truth.times[-1])

    counters = {
        "up_sent": up.sent,
        "up_dropped": up.dropped,
        "down_sent": down.sent,
        "down_dropped": down.dropped,
        "stale_dropped": cloud.stale_dropped,
        "vio_dropped_constraints": vio.dropped_constraints,
        "vio_behind_camera": vio.behind_camera,
        "ekf_too_old": ekf.too_old,
        "ekf_gated": ekf.gated,
        "cloud_cycles": sum(s.cycles for s in cloud.sessions.values()),
        "cloud_low_confidence": sum(
            1 for d in cloud.diagnostics if d["low_confidence"]
        ),
    }
    metrics = RunMetrics(
        ate_median=ate.median,
        ate_std=ate.std,
        ate_times=ate.times,
        ate_errors=ate.errors,
        duration=duration,
        keyframes=keyframes,
        submaps_sent=submap_seq,
        results_sent=results_sent,
        up_bytes=up.total_offered_bytes(),
        down_bytes=down.total_offered_bytes(),
        up_rate=up.total_offered_bytes() / duration if duration > 0 else 0.0,
        down_rate=down.total_offered_bytes() / duration if duration > 0 else 0.0,
        counters=counters,
        cloud_diagnostics=cloud.diagnostics,
    )
    if out_dir is not None:
        _write_run_artifacts(out_dir, cfg, truth, est_times, est_positions, ate, metrics, up, down)
    return metrics


def _write_trajectory(path, times, quats, positions) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["time", "x", "y", "z", "qw", "qx", "qy", "qz"])
        for i, t in enumerate(times):
            q = quats[i] if quats is not None else (1.0, 0.0, 0.0, 0.0)
            p = positions[i]
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in (*p, *q)])


def _write_run_artifacts(out_dir, cfg, truth, est_times, est_positions, ate, metrics, up, down):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as f:
        config_to_parser(cfg).write(f)
    _write_trajectory(os.path.join(out_dir, "trajectory_est.csv"), est_times, None, est_positions)
    _write_trajectory(
        os.path.join(out_dir, "trajectory_gt.csv"), truth.times, truth.quats, truth.positions
    )
    with open(os.path.join(out_dir, "ate_timeseries.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["time", "error"])
        for t, e in zip(ate.times, ate.errors):
            writer.writerow([repr(float(t)), repr(float(e))])
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        keys = [
            "ate_median",
            "ate_std",
            "duration",
            "keyframes",
            "submaps_sent",
            "results_sent",
            "up_bytes",
            "down_bytes",
            "up_rate",
            "down_rate",
        ]
        row = [
            metrics.ate_median,
            metrics.ate_std,
            metrics.duration,
            metrics.keyframes,
            metrics.submaps_sent,
            metrics.results_sent,
            metrics.up_bytes,
            metrics.down_bytes,
            metrics.up_rate,
            metrics.down_rate,
        ]
        keys += list(metrics.counters)
        row += [metrics.counters[k] for k in metrics.counters]
        writer.writerow(keys)
        writer.writerow([repr(v) if isinstance(v, float) else str(v) for v in row])
    with open(os.path.join(out_dir, "cloud.jsonl"), "w") as f:
        for rec in metrics.cloud_diagnostics:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_traffic_csv(os.path.join(out_dir, "traffic.csv"), {"up": up, "down": down})


SWEEP_AXES = ("loss", "latency", "cloud_window")


def apply_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    """Return a copy of cfg with one sweep axis applied.

    Loss applies to both directions; latency is injected on the downlink
    (the localization results), mirroring the worst-case protocol the
    robustness experiments describe; cloud_window sets L.
    """
    if axis == "loss":
        return replace(
            cfg,
            up=replace(cfg.up, loss_probability=float(value)),
            down=replace(cfg.down, loss_probability=float(value)),
        )
    if axis == "latency":
        return replace(
            cfg, down=replace(cfg.down, latency_model="constant", latency=float(value))
        )
    if axis == "cloud_window":
        cloud = replace(cfg.cloud, window_size=int(value))
        return replace(cfg, cloud=cloud)
    raise CloudlocError(f"unknown sweep axis {axis!r} (valid: {SWEEP_AXES})")


def sweep(cfg: ExperimentConfig, axis: str, values, seeds: int = 5, out_dir=None):
    """One run per (axis value, seed); failures become NaN rows.

    Returns the CSV rows [(value, seed, ate_median, ate_std), ...] in
    deterministic order.
    """
    rows = []
    for value in values:
        for s in range(seeds):
            run_cfg = apply_axis(cfg, axis, value).shifted_seeds(1000 * s)
            try:
                m = run_experiment(run_cfg)
                rows.append((value, s, m.ate_median, m.ate_std))
            except CloudlocError:
                rows.append((value, s, float("nan"), float("nan")))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(os.path.join(out_dir, f"sweep_{axis}.csv"), axis, rows)
    return rows


def write_sweep_csv(path, axis: str, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([axis, "seed", "ate_median", "ate_std"])
        for value, s, med, std in rows:
            writer.writerow([repr(float(value)), s, repr(float(med)), repr(float(std))])
