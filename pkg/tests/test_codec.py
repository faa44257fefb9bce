import numpy as np
import pytest

from cloudloc.codec import (
    HEADER_SIZE,
    decode_packet,
    decode_world,
    encode_result,
    encode_submap,
    encode_world,
    pack_symmetric,
    unpack_symmetric,
    unwrap,
)
from cloudloc.errors import ChecksumError, DecodeError
from cloudloc.messages import (
    CloudResultMessage,
    ResultPoint,
    ResultRelativeTransform,
    SubmapKeyframe,
    SubmapMessage,
    SubmapPoint,
    VirtualOdometryEdge,
)
from cloudloc.types import PixelObservation, symmetrize
from cloudloc.world import NoiseConfig, WorldConfig, generate_world

from conftest import random_pose


def random_info(rng, n):
    a = rng.normal(size=(n, n))
    return symmetrize(a @ a.T + n * np.eye(n))


def random_submap(rng, nk=5, npts=8):
    kfs = [SubmapKeyframe(10 + i, 0.1 * i, random_pose(rng)) for i in range(nk)]
    edges = [
        VirtualOdometryEdge(10 + i, 11 + i, random_pose(rng), random_info(rng, 6))
        for i in range(nk - 1)
    ]
    pts = [SubmapPoint(100 + k, rng.normal(size=3)) for k in range(npts)]
    obs = [
        PixelObservation(100 + rng.integers(npts), 10 + rng.integers(nk), rng.uniform(0, 640, 2), random_info(rng, 2))
        for _ in range(3 * npts)
    ]
    return SubmapMessage(int(rng.integers(1, 5)), int(rng.integers(1, 1000)), kfs, edges, pts, obs)


def random_result(rng, nk=5, npts=6):
    rels = [
        ResultRelativeTransform(i, i + 1, random_pose(rng), random_info(rng, 6))
        for i in range(nk - 1)
    ]
    pts = [ResultPoint(200 + k, rng.normal(size=3), random_info(rng, 3)) for k in range(npts)]
    return CloudResultMessage(
        1, int(rng.integers(1, 1000)), nk, 1.25, random_pose(rng), random_info(rng, 6), rels, pts
    )


def assert_submaps_equal(a: SubmapMessage, b: SubmapMessage):
    assert (a.robot_id, a.sequence) == (b.robot_id, b.sequence)
    assert len(a.keyframes) == len(b.keyframes)
    for x, y in zip(a.keyframes, b.keyframes):
        assert x.kf_id == y.kf_id and x.timestamp == y.timestamp
        assert np.array_equal(x.pose.q, y.pose.q) and np.array_equal(x.pose.t, y.pose.t)
    for x, y in zip(a.virtual_odometry, b.virtual_odometry):
        assert (x.from_kf, x.to_kf) == (y.from_kf, y.to_kf)
        assert np.array_equal(x.info, y.info)
    for x, y in zip(a.points, b.points):
        assert x.point_id == y.point_id and np.array_equal(x.position, y.position)
    for x, y in zip(a.observations, b.observations):
        assert (x.point_id, x.keyframe_id) == (y.point_id, y.keyframe_id)
        assert np.array_equal(x.pixel, y.pixel) and np.array_equal(x.info, y.info)


def test_submap_round_trip_many():
    rng = np.random.default_rng(0)
    for _ in range(500):
        msg = random_submap(rng)
        packet = encode_submap(msg)
        out = decode_packet(packet)
        assert_submaps_equal(msg, out)


def test_result_round_trip_many():
    rng = np.random.default_rng(1)
    for _ in range(500):
        msg = random_result(rng)
        out = decode_packet(encode_result(msg))
        assert (out.robot_id, out.sequence, out.latest_kf_id) == (
            msg.robot_id,
            msg.sequence,
            msg.latest_kf_id,
        )
        assert np.array_equal(out.pose.q, msg.pose.q)
        assert np.array_equal(out.pose_info, msg.pose_info)
        assert len(out.relative_transforms) == len(msg.relative_transforms)
        for x, y in zip(out.points, msg.points):
            assert np.array_equal(x.position, y.position) and np.array_equal(x.info, y.info)


def test_encoding_is_deterministic():
    rng1 = np.random.default_rng(2)
    rng2 = np.random.default_rng(2)
    assert encode_submap(random_submap(rng1)) == encode_submap(random_submap(rng2))


def test_empty_submap_minimal_size():
    msg = SubmapMessage(1, 1, [], [], [], [])
    packet = encode_submap(msg)
    # header + robot_id(4) + sequence(8) + four zero counts (4 each)
    assert len(packet) == HEADER_SIZE + 4 + 8 + 16
    assert msg.byte_size == len(packet)


def test_corrupted_payload_fails_checksum():
    rng = np.random.default_rng(3)
    packet = bytearray(encode_submap(random_submap(rng)))
    packet[HEADER_SIZE + 10] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_packet(bytes(packet))


def test_header_validation():
    rng = np.random.default_rng(4)
    packet = encode_submap(random_submap(rng))
    with pytest.raises(DecodeError):
        unwrap(b"XXXX" + packet[4:])
    with pytest.raises(DecodeError):
        unwrap(packet[: HEADER_SIZE - 1])
    with pytest.raises(DecodeError):
        unwrap(packet + b"\x00")


def test_pack_symmetric_round_trip():
    rng = np.random.default_rng(5)
    for n in (2, 3, 6, 9):
        m = random_info(rng, n)
        assert np.array_equal(unpack_symmetric(pack_symmetric(m), n), m)


def test_world_container_round_trip():
    cfg = WorldConfig(
        seed=3,
        trajectory_kind="figure-eight",
        path_length=40.0,
        speed=2.0,
        landmark_count=60,
        noise=NoiseConfig(pixel_sigma=0.5),
    )
    truth = generate_world(cfg)
    packet = encode_world(truth)
    out = decode_world(packet)
    assert out.config == cfg
    for name in ("times", "quats", "positions", "velocities", "landmarks", "map_points", "map_normals"):
        assert np.array_equal(getattr(out, name), getattr(truth, name)), name
    assert np.array_equal(out.frame_imu_index, truth.frame_imu_index)
