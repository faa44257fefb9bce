"""Bit-exact binary codec for all wire messages and the world container.

Layout is canonical little-endian with 64-bit floats and a fixed field
order; see docs/wire_format.md for the byte-exact reference.  Symmetric
matrices travel as their upper triangle (row major), which is where most
of the sparsified message's size advantage over a naive dump comes from.
"""

from __future__ import annotations

import configparser
import io
import struct
import zlib

import numpy as np

from .errors import ChecksumError, DecodeError
from .messages import (
    CloudResultMessage,
    ResultPoint,
    ResultRelativeTransform,
    SubmapKeyframe,
    SubmapMessage,
    SubmapPoint,
    VirtualOdometryEdge,
)
from .se3 import Pose
from .types import PixelObservation

MAGIC = b"CLVL"
VERSION = 1
KIND_SUBMAP = 1
KIND_RESULT = 2
KIND_WORLD = 3

_HEADER = struct.Struct("<4sBBIQII")
HEADER_SIZE = _HEADER.size


def pack_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    iu = np.triu_indices(n)
    return m[iu]


def unpack_symmetric(vec: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    iu = np.triu_indices(n)
    out[iu] = vec
    out = out + out.T - np.diag(np.diag(out))
    return out


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u16(self, v):
        self.buf.write(struct.pack("<H", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v):
        self.buf.write(struct.pack("<Q", v))

    def f64s(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def pose(self, p: Pose):
        self.f64s(np.concatenate([p.q, p.t]))

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.data):
            raise DecodeError("payload truncated")
        v = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return v[0]

    def u8(self):
        return self._take("<B")

    def u16(self):
        return self._take("<H")

    def u32(self):
        return self._take("<I")

    def u64(self):
        return self._take("<Q")

    def f64s(self, count) -> np.ndarray:
        nbytes = 8 * count
        if self.pos + nbytes > len(self.data):
            raise DecodeError("payload truncated")
        out = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out

    def pose(self) -> Pose:
        v = self.f64s(7)
        return Pose(v[:4], v[4:])

    def done(self):
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")


def _wrap(kind: int, robot_id: int, sequence: int, payload: bytes) -> bytes:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return _HEADER.pack(MAGIC, VERSION, kind, robot_id, sequence, len(payload), crc) + payload


def unwrap(packet: bytes):
    """Split a wire packet; validates magic, version, length and checksum.

    Returns (kind, robot_id, sequence, payload bytes).
    """
    if len(packet) < HEADER_SIZE:
        raise DecodeError("packet shorter than header")
    magic, version, kind, robot_id, sequence, length, crc = _HEADER.unpack_from(packet, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    payload = packet[HEADER_SIZE:]
    if len(payload) != length:
        raise DecodeError(f"length mismatch: header {length}, got {len(payload)}")
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
        raise ChecksumError("payload checksum mismatch")
    return kind, robot_id, sequence, payload


def encode_submap(msg: SubmapMessage) -> bytes:
    w = _Writer()
    w.u32(msg.robot_id)
    w.u64(msg.sequence)
    w.u32(len(msg.keyframes))
    for kf in msg.keyframes:
        w.u32(kf.kf_id)
        w.f64s([kf.timestamp])
        w.pose(kf.pose)
    w.u32(len(msg.virtual_odometry))
    for e in msg.virtual_odometry:
        w.u32(e.from_kf)
        w.u32(e.to_kf)
        w.pose(e.measurement)
        w.f64s(pack_symmetric(e.info))
    w.u32(len(msg.points))
    for p in msg.points:
        w.u32(p.point_id)
        w.f64s(p.position)
    w.u32(len(msg.observations))
    for o in msg.observations:
        w.u32(o.point_id)
        w.u32(o.keyframe_id)
        w.f64s(o.pixel)
        w.f64s(pack_symmetric(o.info))
    packet = _wrap(KIND_SUBMAP, msg.robot_id, msg.sequence, w.getvalue())
    msg.byte_size = len(packet)
    return packet


def decode_submap(payload: bytes) -> SubmapMessage:
    r = _Reader(payload)
    robot_id = r.u32()
    sequence = r.u64()
    kfs = []
    for _ in range(r.u32()):
        kf_id = r.u32()
        ts = float(r.f64s(1)[0])
        kfs.append(SubmapKeyframe(kf_id, ts, r.pose()))
    edges = []
    for _ in range(r.u32()):
        i, j = r.u32(), r.u32()
        pose = r.pose()
        edges.append(VirtualOdometryEdge(i, j, pose, unpack_symmetric(r.f64s(21), 6)))
    pts = []
    for _ in range(r.u32()):
        pid = r.u32()
        pts.append(SubmapPoint(pid, r.f64s(3)))
    obs = []
    for _ in range(r.u32()):
        pid, kid = r.u32(), r.u32()
        px = r.f64s(2)
        obs.append(PixelObservation(pid, kid, px, unpack_symmetric(r.f64s(3), 2)))
    r.done()
    msg = SubmapMessage(robot_id, sequence, kfs, edges, pts, obs)
    msg.byte_size = HEADER_SIZE + len(payload)
    return msg


def encode_result(msg: CloudResultMessage) -> bytes:
    w = _Writer()
    w.u32(msg.robot_id)
    w.u64(msg.sequence)
    w.u32(msg.latest_kf_id)
    w.f64s([msg.timestamp])
    w.pose(msg.pose)
    w.f64s(pack_symmetric(msg.pose_info))
    w.u32(len(msg.relative_transforms))
    for e in msg.relative_transforms:
        w.u32(e.from_kf)
        w.u32(e.to_kf)
        w.pose(e.measurement)
        w.f64s(pack_symmetric(e.info))
    w.u32(len(msg.points))
    for p in msg.points:
        w.u32(p.point_id)
        w.f64s(p.position)
        w.f64s(pack_symmetric(p.info))
    packet = _wrap(KIND_RESULT, msg.robot_id, msg.sequence, w.getvalue())
    msg.byte_size = len(packet)
    return packet


def decode_result(payload: bytes) -> CloudResultMessage:
    r = _Reader(payload)
    robot_id = r.u32()
    sequence = r.u64()
    latest = r.u32()
    ts = float(r.f64s(1)[0])
    pose = r.pose()
    pose_info = unpack_symmetric(r.f64s(21), 6)
    rels = []
    for _ in range(r.u32()):
        i, j = r.u32(), r.u32()
        meas = r.pose()
        rels.append(ResultRelativeTransform(i, j, meas, unpack_symmetric(r.f64s(21), 6)))
    pts = []
    for _ in range(r.u32()):
        pid = r.u32()
        pos = r.f64s(3)
        pts.append(ResultPoint(pid, pos, unpack_symmetric(r.f64s(6), 3)))
    r.done()
    msg = CloudResultMessage(robot_id, sequence, latest, ts, pose, pose_info, rels, pts)
    msg.byte_size = HEADER_SIZE + len(payload)
    return msg


def decode_packet(packet: bytes):
    """Decode any wire packet into its message object."""
    kind, _, _, payload = unwrap(packet)
    if kind == KIND_SUBMAP:
        return decode_submap(payload)
    if kind == KIND_RESULT:
        return decode_result(payload)
    raise DecodeError(f"unknown message kind {kind}")


def encode_naive_window(keyframes, preints, points, observations) -> bytes:
    """Serializer A/B baseline: the same window without sparsification.

    Carries full nav states (pose+velocity+biases), the raw preintegration
    factors with their 9x9 information, bias Jacobians and bias information,
    plus every window point and observation unfiltered.
    """
    w = _Writer()
    w.u32(len(keyframes))
    for kf_id, ts, pose, vel, bias in keyframes:
        w.u32(kf_id)
        w.f64s([ts])
        w.pose(pose)
        w.f64s(vel)
        w.f64s(bias)
    w.u32(len(preints))
    for i, j, pre in preints:
        w.u32(i)
        w.u32(j)
        w.f64s(pre.delta_rotation)
        w.f64s(pre.delta_position)
        w.f64s(pre.delta_velocity)
        w.f64s([pre.duration])
        w.f64s(pack_symmetric(pre.info))
        w.f64s(pre.bias_jacobians.ravel())
        w.f64s(pack_symmetric(pre.bias_info))
        w.f64s(pre.reference_bias_accel)
        w.f64s(pre.reference_bias_gyro)
    w.u32(len(points))
    for pid, pos in points:
        w.u32(pid)
        w.f64s(pos)
    w.u32(len(observations))
    for o in observations:
        w.u32(o.point_id)
        w.u32(o.keyframe_id)
        w.f64s(o.pixel)
        w.f64s(pack_symmetric(o.info))
    return _wrap(KIND_SUBMAP, 0, 0, w.getvalue())


# ---------------------------------------------------------------------------
# world container


def encode_world(truth) -> bytes:
    from .world import GroundTruth  # local import to avoid a cycle

    assert isinstance(truth, GroundTruth)
    cfg = truth.config
    parser = configparser.ConfigParser()
    parser["world"] = {
        "seed": str(cfg.seed),
        "trajectory_kind": cfg.trajectory_kind,
        "path_length": repr(cfg.path_length),
        "speed": repr(cfg.speed),
        "landmark_count": str(cfg.landmark_count),
        "visibility_radius": repr(cfg.visibility_radius),
        "imu_rate": repr(cfg.imu_rate),
        "frame_rate": repr(cfg.frame_rate),
        "map_point_spacing": repr(cfg.map_point_spacing),
    }
    parser["noise"] = {
        "gyro_noise_density": repr(cfg.noise.gyro_noise_density),
        "accel_noise_density": repr(cfg.noise.accel_noise_density),
        "gyro_bias_walk": repr(cfg.noise.gyro_bias_walk),
        "accel_bias_walk": repr(cfg.noise.accel_bias_walk),
        "pixel_sigma": repr(cfg.noise.pixel_sigma),
        "map_point_sigma": repr(cfg.noise.map_point_sigma),
    }
    sio = io.StringIO()
    parser.write(sio)
    cfg_bytes = sio.getvalue().encode("utf-8")

    arrays = {
        "times": truth.times,
        "quats": truth.quats,
        "positions": truth.positions,
        "velocities": truth.velocities,
        "bias_accel": truth.bias_accel,
        "bias_gyro": truth.bias_gyro,
        "yaw_rates": truth.yaw_rates,
        "accels_w": truth.accels_w,
        "landmarks": truth.landmarks,
        "map_points": truth.map_points,
        "map_normals": truth.map_normals,
        "frame_times": truth.frame_times,
        "frame_imu_index": truth.frame_imu_index.astype(float),
    }
    w = _Writer()
    w.u32(len(cfg_bytes))
    w.buf.write(cfg_bytes)
    w.u32(len(arrays))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        w.u16(len(nb))
        w.buf.write(nb)
        arr = np.asarray(arr, dtype=float)
        w.u8(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.f64s(arr.ravel())
    return _wrap(KIND_WORLD, 0, 0, w.getvalue())


def decode_world(packet: bytes):
    from .world import GroundTruth, NoiseConfig, WorldConfig

    kind, _, _, payload = unwrap(packet)
    if kind != KIND_WORLD:
        raise DecodeError(f"not a world container (kind {kind})")
    r = _Reader(payload)
    cfg_len = r.u32()
    cfg_text = payload[r.pos : r.pos + cfg_len].decode("utf-8")
    r.pos += cfg_len
    parser = configparser.ConfigParser()
    parser.read_string(cfg_text)
    wsec, nsec = parser["world"], parser["noise"]
    noise = NoiseConfig(
        gyro_noise_density=nsec.getfloat("gyro_noise_density"),
        accel_noise_density=nsec.getfloat("accel_noise_density"),
        gyro_bias_walk=nsec.getfloat("gyro_bias_walk"),
        accel_bias_walk=nsec.getfloat("accel_bias_walk"),
        pixel_sigma=nsec.getfloat("pixel_sigma"),
        map_point_sigma=nsec.getfloat("map_point_sigma"),
    )
    cfg = WorldConfig(
        seed=wsec.getint("seed"),
        trajectory_kind=wsec.get("trajectory_kind"),
        path_length=wsec.getfloat("path_length"),
        speed=wsec.getfloat("speed"),
        landmark_count=wsec.getint("landmark_count"),
        visibility_radius=wsec.getfloat("visibility_radius"),
        imu_rate=wsec.getfloat("imu_rate"),
        frame_rate=wsec.getfloat("frame_rate"),
        noise=noise,
        map_point_spacing=wsec.getfloat("map_point_spacing"),
    )
    arrays = {}
    for _ in range(r.u32()):
        nlen = r.u16()
        name = payload[r.pos : r.pos + nlen].decode("utf-8")
        r.pos += nlen
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = r.f64s(count).reshape(shape)
    r.done()
    return GroundTruth(
        config=cfg,
        times=arrays["times"],
        quats=arrays["quats"],
        positions=arrays["positions"],
        velocities=arrays["velocities"],
        bias_accel=arrays["bias_accel"],
        bias_gyro=arrays["bias_gyro"],
        yaw_rates=arrays["yaw_rates"],
        accels_w=arrays["accels_w"],
        landmarks=arrays["landmarks"],
        map_points=arrays["map_points"],
        map_normals=arrays["map_normals"],
        frame_times=arrays["frame_times"],
        frame_imu_index=arrays["frame_imu_index"].astype(int),
    )


def save_world(truth, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_world(truth))


def load_world(path):
    with open(path, "rb") as f:
        return decode_world(f.read())
