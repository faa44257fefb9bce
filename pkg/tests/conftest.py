import numpy as np
import pytest

from cloudloc.camera import PinholeCamera, forward_facing_extrinsic
from cloudloc.se3 import Pose, so3_exp
from cloudloc.types import NavState
from cloudloc.vio import SlidingWindowVio, VioConfig
from cloudloc.world import GRAVITY_W, NoiseConfig, WorldConfig, generate_world, synth_frames, synth_imu


def build_pipeline(
    path_length=40.0,
    noise=None,
    trajectory="circle",
    landmark_count=200,
    vio_config=None,
    max_frames=None,
    seed=7,
):
    """World + sensor streams + a VIO fed to the end (or max_frames)."""
    noise = noise or NoiseConfig().zeroed()
    wcfg = WorldConfig(
        seed=seed,
        trajectory_kind=trajectory,
        path_length=path_length,
        speed=2.0,
        landmark_count=landmark_count,
        visibility_radius=12.0,
        imu_rate=200.0,
        frame_rate=10.0,
        noise=noise,
    )
    truth = generate_world(wcfg)
    camera = PinholeCamera()
    t_cb = forward_facing_extrinsic(np.array([0.05, 0.0, 0.02]))
    imu = synth_imu(truth, noise, seed=1001)
    frames = synth_frames(truth, camera, t_cb, noise, seed=2002)
    t_wo = truth.first_pose()
    vio = SlidingWindowVio(
        vio_config or VioConfig(),
        camera,
        t_cb,
        NavState(0.0, Pose.identity(), t_wo.R.T @ truth.velocities[0], np.zeros(3), np.zeros(3)),
        t_wo.R.T @ GRAVITY_W,
        noise,
    )
    keyframes = []
    fi = 0
    for k, s in enumerate(imu):
        vio.add_imu(s)
        while fi < len(frames) and truth.frame_imu_index[fi] == k:
            kf = vio.process_frame(frames[fi])
            if kf is not None:
                keyframes.append(kf)
            fi += 1
        if max_frames is not None and fi >= max_frames:
            break
    return vio, truth, camera, t_cb, keyframes


def random_pose(rng, max_angle=np.pi - 0.2, max_trans=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(axis * angle), rng.uniform(-max_trans, max_trans, 3))


def numeric_jacobian(f, x0, in_dim, retract, eps=1e-6):
    """Central-difference Jacobian of f around x0 through a retraction."""
    y0 = np.atleast_1d(f(x0))
    J = np.zeros((y0.size, in_dim))
    for k in range(in_dim):
        d = np.zeros(in_dim)
        d[k] = eps
        yp = np.atleast_1d(f(retract(x0, d)))
        ym = np.atleast_1d(f(retract(x0, -d)))
        J[:, k] = (yp - ym) / (2.0 * eps)
    return J


def pose_retract(pose, delta):
    return pose.retract(delta)


def vec_retract(v, delta):
    return v + delta


def rel_error(analytic, numeric):
    denom = max(np.max(np.abs(numeric)), 1.0)
    return np.max(np.abs(analytic - numeric)) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(42)
