import numpy as np
import pytest

from cloudloc.camera import PinholeCamera, forward_facing_extrinsic
from cloudloc.cloud import (
    CloudConfig,
    CloudLocalizer,
    CloudServer,
    LaserMap,
    RobotSession,
    associate,
    ingest_submap,
)
from cloudloc.errors import ConfigError, StaleMessage
from cloudloc.harness import perturb_pose
from cloudloc.se3 import Pose
from cloudloc.sparsifier import sparsify_window
from cloudloc.types import symmetrize
from cloudloc.world import NoiseConfig, WorldConfig, generate_world

from conftest import build_pipeline, random_pose


@pytest.fixture(scope="module")
def zero_noise_setup():
    """Zero-noise pipeline far enough in to have evicted old keyframes,
    plus a stream of submaps exactly as the uplink would carry them."""
    vio, truth, cam, t_cb, keyframes = build_pipeline(path_length=60.0, landmark_count=260)
    return vio, truth, cam, t_cb


def make_map(truth, cfg=None):
    cfg = cfg or CloudConfig()
    return LaserMap.from_world(truth, cfg.planarity_neighbors, cfg.planarity_ratio)


def run_client_submaps(path_length=50.0, noise=None, landmark_count=260, seed=7, every=1):
    """Replay a pipeline, collecting the submap after each keyframe."""
    from cloudloc.camera import PinholeCamera
    from cloudloc.se3 import Pose as P

    submaps = []

    vio, truth, cam, t_cb, keyframes = build_pipeline(
        path_length=path_length, noise=noise, landmark_count=landmark_count, seed=seed
    )
    # rebuild with a callback-style replay: simpler to just re-run frames
    # through a fresh vio capturing a submap per keyframe
    import conftest

    noise = noise or NoiseConfig().zeroed()
    vio2, truth2, cam2, t_cb2, _ = conftest.build_pipeline(
        path_length=path_length, noise=noise, landmark_count=landmark_count, seed=seed, max_frames=0
    )
    from cloudloc.world import synth_frames, synth_imu

    imu = synth_imu(truth2, noise, seed=1001)
    frames = synth_frames(truth2, cam2, t_cb2, noise, seed=2002)
    fi = 0
    seq = 0
    for k, s in enumerate(imu):
        vio2.add_imu(s)
        while fi < len(frames) and truth2.frame_imu_index[fi] == k:
            kf = vio2.process_frame(frames[fi])
            fi += 1
            if kf is not None and len(vio2.window) >= 2:
                seq += 1
                if seq % every == 0:
                    submaps.append(sparsify_window(vio2, robot_id=1, sequence=seq))
    return vio2, truth2, cam2, t_cb2, submaps


# ---------------------------------------------------------------------------
# LaserMap and association


def test_map_normals_validated():
    pts = np.zeros((5, 3))
    bad = np.tile([0.0, 0.0, 2.0], (5, 1))
    with pytest.raises(ConfigError):
        LaserMap(pts, bad, sigma=0.01)


def test_associate_coincident_and_out_of_radius(zero_noise_setup):
    _, truth, *_ = zero_noise_setup
    laser = make_map(truth)
    q = truth.map_points[123]
    a = associate(q, laser, radius=1.0)
    assert a is not None
    assert np.allclose(laser.points[a.map_index], q)
    far = associate(q + np.array([0.0, 0.0, 50.0]), laser, radius=1.0)
    assert far is None


def test_associate_kind_is_planar_on_wall_interiors(zero_noise_setup):
    _, truth, *_ = zero_noise_setup
    laser = make_map(truth)
    kinds = [associate(truth.landmarks[i], laser, 1.0).kind for i in range(60)]
    assert kinds.count("point-to-plane") > len(kinds) * 0.5


def test_index_matches_linear_scan_oracle(zero_noise_setup):
    _, truth, *_ = zero_noise_setup
    laser = make_map(truth)
    rng = np.random.default_rng(0)
    lo, hi = truth.map_points.min(axis=0), truth.map_points.max(axis=0)
    queries = rng.uniform(lo, hi, size=(10_000, 3))
    idx = laser.associate_many(queries, radius=np.inf)
    # brute-force oracle on a subsample (full scan is O(N*M))
    for k in range(0, 10_000, 97):
        d = np.linalg.norm(truth.map_points - queries[k], axis=1)
        assert d[idx[k]] == pytest.approx(d.min())


# ---------------------------------------------------------------------------
# ingest


def test_ingest_identity_anchor_keeps_states(zero_noise_setup):
    vio, truth, *_ = zero_noise_setup
    msg = sparsify_window(vio, robot_id=1, sequence=1)
    session = RobotSession(1, Pose.identity())
    ingest_submap(session, msg, stale_horizon=40)
    for kf in msg.keyframes:
        rec = session.kf_db[kf.kf_id]
        assert np.array_equal(rec.pose_w.q, kf.pose.q)
        assert np.array_equal(rec.pose_w.t, kf.pose.t)
    for pt in msg.points:
        assert np.array_equal(session.pt_db[pt.point_id].position_w, pt.position)


def test_ingest_idempotent(zero_noise_setup):
    vio, *_ = zero_noise_setup
    msg = sparsify_window(vio, robot_id=1, sequence=5)
    s1 = RobotSession(1, random_pose(np.random.default_rng(1)))
    ingest_submap(s1, msg, 40)
    snap_kf = {i: (r.pose_w.q.copy(), r.pose_w.t.copy()) for i, r in s1.kf_db.items()}
    snap_pt = {i: r.position_w.copy() for i, r in s1.pt_db.items()}
    ingest_submap(s1, msg, 40)
    assert set(s1.kf_db) == set(snap_kf) and set(s1.pt_db) == set(snap_pt)
    for i, (q, t) in snap_kf.items():
        assert np.array_equal(s1.kf_db[i].pose_w.q, q)
        assert np.array_equal(s1.kf_db[i].pose_w.t, t)
    for i, p in snap_pt.items():
        assert np.array_equal(s1.pt_db[i].position_w, p)


def test_ingest_rotates_edge_info_preserving_eigenvalues(zero_noise_setup):
    vio, *_ = zero_noise_setup
    msg = sparsify_window(vio, robot_id=1, sequence=6)
    anchor = random_pose(np.random.default_rng(2))
    session = RobotSession(1, anchor)
    ingest_submap(session, msg, 40)
    for e in msg.virtual_odometry:
        stored = session.edge_db[(e.from_kf, e.to_kf)][1]
        w_in = np.sort(np.linalg.eigvalsh(symmetrize(e.info)))
        w_out = np.sort(np.linalg.eigvalsh(symmetrize(stored)))
        assert np.allclose(w_in, w_out, rtol=1e-9, atol=1e-9)


def test_ingest_transforms_states(zero_noise_setup):
    vio, *_ = zero_noise_setup
    msg = sparsify_window(vio, robot_id=1, sequence=7)
    anchor = random_pose(np.random.default_rng(3))
    session = RobotSession(1, anchor)
    ingest_submap(session, msg, 40)
    for kf in msg.keyframes:
        expected = anchor.compose(kf.pose)
        assert np.linalg.norm(session.kf_db[kf.kf_id].pose_w.local(expected)) < 1e-12
    for pt in msg.points:
        assert np.allclose(session.pt_db[pt.point_id].position_w, anchor.act(pt.position))


def test_stale_message_dropped(zero_noise_setup):
    vio, *_ = zero_noise_setup
    msg = sparsify_window(vio, robot_id=1, sequence=100)
    session = RobotSession(1, Pose.identity())
    ingest_submap(session, msg, 40)
    old = sparsify_window(vio, robot_id=1, sequence=10)
    with pytest.raises(StaleMessage):
        ingest_submap(session, old, stale_horizon=40)
    assert session.stale_dropped == 1


def test_out_of_order_fills_gaps_without_superseding(zero_noise_setup):
    vio, *_ = zero_noise_setup
    new = sparsify_window(vio, robot_id=1, sequence=20)
    session = RobotSession(1, Pose.identity())
    ingest_submap(session, new, 40)
    # an older message with a shifted pose for the same keyframes
    old = sparsify_window(vio, robot_id=1, sequence=15)
    for kf in old.keyframes:
        kf.pose = kf.pose.retract(np.full(6, 0.1))
    ingest_submap(session, old, 40)
    for kf in new.keyframes:
        rec = session.kf_db[kf.kf_id]
        assert rec.sequence == 20
        assert np.array_equal(rec.pose_w.t, kf.pose.t)  # not overwritten


# ---------------------------------------------------------------------------
# localization


def test_zero_noise_localize_fixed_point(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    t_wo = truth.first_pose()
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    server = CloudServer(localizer, {1: t_wo})

    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    session = server.session(1)
    for msg in submaps[:30]:
        ingest_submap(session, msg, cfg.stale_horizon)
    latest = max(session.kf_db)
    outcome = localizer.localize(session, latest)
    assert not outcome.low_confidence
    assert outcome.final_cost < max(1e-3, 1e-3 * outcome.initial_cost)
    # newest pose lands on the truth
    rec_pose = outcome.values[("pose", latest)]
    k = truth.index_of_time(session.kf_db[latest].timestamp)
    assert np.linalg.norm(rec_pose.t - truth.pose(k).t) < 2e-3


def test_localize_at_exact_truth_cost_floor(zero_noise_setup):
    # database constructed exactly at ground truth: E_loc < 1e-12, unchanged
    vio, truth, cam, t_cb = zero_noise_setup
    t_wo = truth.first_pose()
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    session = RobotSession(1, t_wo)
    msg = sparsify_window(vio, robot_id=1, sequence=1)
    ingest_submap(session, msg, cfg.stale_horizon)
    # overwrite with exact truth states (poses and points)
    for kf_id, rec in session.kf_db.items():
        k = truth.index_of_time(rec.timestamp)
        rec.pose_w = truth.pose(k)
    for pid, rec in session.pt_db.items():
        rec.position_w = truth.landmarks[pid].copy()
    # virtual odometry measurements: replace with exact truth relatives
    for (i, j), entry in session.edge_db.items():
        ki = truth.index_of_time(session.kf_db[i].timestamp)
        kj = truth.index_of_time(session.kf_db[j].timestamp)
        entry[0] = truth.pose(ki).inverse().compose(truth.pose(kj))
    outcome = localizer.localize(session, max(session.kf_db))
    assert outcome.final_cost < 1e-12
    for kf_id, rec in session.kf_db.items():
        k = truth.index_of_time(rec.timestamp)
        assert np.linalg.norm(outcome.values[("pose", kf_id)].local(truth.pose(k))) < 1e-9


def test_perturbed_anchor_improves_newest_pose(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    t_wo_bad = perturb_pose(truth.first_pose(), 0.2, 0.5, seed=3)
    session = RobotSession(1, t_wo_bad)
    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    for msg in submaps[:25]:
        ingest_submap(session, msg, cfg.stale_horizon)
    latest = max(session.kf_db)
    k = truth.index_of_time(session.kf_db[latest].timestamp)
    before = np.linalg.norm(session.kf_db[latest].pose_w.t - truth.pose(k).t)
    outcome = localizer.localize(session, latest)
    after = np.linalg.norm(outcome.values[("pose", latest)].t - truth.pose(k).t)
    assert not outcome.low_confidence
    assert after < before


def test_association_set_stabilizes(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    session = RobotSession(1, perturb_pose(truth.first_pose(), 0.1, 0.2, seed=4))
    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    for msg in submaps[:20]:
        ingest_submap(session, msg, cfg.stale_horizon)
    outcome = localizer.localize(session, max(session.kf_db))
    assert outcome.assoc_stable
    assert outcome.assoc_epochs <= cfg.max_assoc_epochs


def test_low_confidence_when_no_map(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    # a distant fake map: nothing associates within the radius
    far = truth.map_points + np.array([0.0, 0.0, 500.0])
    laser = LaserMap(far, truth.map_normals, sigma=0.01)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    session = RobotSession(1, truth.first_pose())
    msg = sparsify_window(vio, robot_id=1, sequence=1)
    ingest_submap(session, msg, cfg.stale_horizon)
    t_wo_before = session.t_wo
    outcome = localizer.localize(session, max(session.kf_db))
    assert outcome.low_confidence
    localizer.commit(session, outcome, now=1.0)
    assert session.t_wo is t_wo_before  # anchor untouched


def test_full_rank_normal_matrix_with_map_factors(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    session = RobotSession(1, truth.first_pose())
    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    for msg in submaps[:15]:
        ingest_submap(session, msg, cfg.stale_horizon)
    outcome = localizer.localize(session, max(session.kf_db))
    assert outcome.n_point_to_plane + outcome.n_point_to_point >= cfg.min_map_factors
    assert localizer.normal_matrix_full_rank(outcome)


def test_anchor_updated_from_newest_pose(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    session = RobotSession(1, perturb_pose(truth.first_pose(), 0.15, 0.3, seed=5))
    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    for msg in submaps[:25]:
        ingest_submap(session, msg, cfg.stale_horizon)
    latest = max(session.kf_db)
    outcome = localizer.localize(session, latest)
    localizer.commit(session, outcome, now=2.0)
    rec = session.kf_db[latest]
    expected = rec.pose_w.compose(rec.pose_o.inverse())
    assert np.linalg.norm(session.t_wo.local(expected)) < 1e-12
    # after commit the anchor is closer to the true one
    err = session.t_wo.local(truth.first_pose())
    assert np.linalg.norm(err[3:]) < 0.05


# ---------------------------------------------------------------------------
# feedback


def test_build_result_chain_and_round_trip(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    laser = make_map(truth)
    cfg = CloudConfig()
    localizer = CloudLocalizer(laser, cam, t_cb, cfg)
    session = RobotSession(1, truth.first_pose())
    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    for msg in submaps[:25]:
        ingest_submap(session, msg, cfg.stale_horizon)
    outcome = localizer.localize(session, max(session.kf_db))
    localizer.commit(session, outcome, now=3.0)
    result = localizer.build_result(session, outcome)
    assert len(result.relative_transforms) == cfg.feedback_window - 1
    # returned point positions, mapped back to W, equal the optimized ones
    for p in result.points:
        w_pos = session.t_wo.act(p.position)
        assert np.allclose(w_pos, outcome.values[("pt", p.point_id)], atol=1e-12)
        assert np.all(np.linalg.eigvalsh(symmetrize(p.info)) > 0)
    for rel in result.relative_transforms:
        assert np.all(np.linalg.eigvalsh(symmetrize(rel.info)) > 0)
    assert np.all(np.linalg.eigvalsh(symmetrize(result.pose_info)) > 0)


def test_per_robot_isolation(zero_noise_setup):
    vio, truth, cam, t_cb = zero_noise_setup
    laser = make_map(truth)
    cfg = CloudConfig()
    _, _, _, _, submaps = run_client_submaps(path_length=50.0)
    anchors = {1: truth.first_pose(), 2: perturb_pose(truth.first_pose(), 0.1, 0.2, seed=6)}

    def msg_for(robot, msg):
        import copy

        m = copy.deepcopy(msg)
        m.robot_id = robot
        return m

    # interleaved ingestion
    srv_a = CloudServer(CloudLocalizer(laser, cam, t_cb, cfg), anchors)
    for msg in submaps[:8]:
        srv_a.handle_submap(msg_for(1, msg), now=msg.sequence * 1.0)
        srv_a.handle_submap(msg_for(2, msg), now=msg.sequence * 1.0 + 0.5)
    # sequential ingestion
    srv_b = CloudServer(CloudLocalizer(laser, cam, t_cb, cfg), anchors)
    for msg in submaps[:8]:
        srv_b.handle_submap(msg_for(1, msg), now=msg.sequence * 1.0)
    for msg in submaps[:8]:
        srv_b.handle_submap(msg_for(2, msg), now=msg.sequence * 1.0 + 0.5)

    for robot in (1, 2):
        sa, sb = srv_a.session(robot), srv_b.session(robot)
        assert set(sa.kf_db) == set(sb.kf_db)
        for i in sa.kf_db:
            assert np.allclose(sa.kf_db[i].pose_w.t, sb.kf_db[i].pose_w.t, atol=1e-12)
        assert np.allclose(sa.t_wo.t, sb.t_wo.t, atol=1e-12)
