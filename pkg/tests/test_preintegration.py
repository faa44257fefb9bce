import numpy as np
import pytest

from cloudloc.errors import EmptyInterval
from cloudloc.preintegration import preintegrate
from cloudloc.types import ImuSample
from cloudloc.world import NoiseConfig

NOISE = NoiseConfig()
ZERO = np.zeros(3)


def make_samples(n, dt, gyro, accel):
    return [ImuSample(i * dt, np.asarray(gyro(i * dt)), np.asarray(accel(i * dt))) for i in range(n)]


def test_empty_interval():
    with pytest.raises(EmptyInterval):
        preintegrate([], ZERO, ZERO, NOISE)
    with pytest.raises(EmptyInterval):
        preintegrate([ImuSample(0.0, ZERO, ZERO)], ZERO, ZERO, NOISE)


def test_zero_gyro_gives_identity_rotation():
    samples = make_samples(50, 0.005, lambda t: ZERO, lambda t: [0.1, 0.0, 9.81])
    pre = preintegrate(samples, ZERO, ZERO, NOISE)
    assert np.allclose(pre.delta_rotation, [1.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_constant_accel_closed_form():
    # kinematics oracle: dv = a T, dp = a T^2 / 2 under zero rotation
    a = np.array([0.3, -0.2, 9.81])
    T = 0.5
    samples = make_samples(101, T / 100, lambda t: ZERO, lambda t: a)
    pre = preintegrate(samples, ZERO, ZERO, NOISE)
    assert np.allclose(pre.delta_velocity, a * T, atol=1e-9)
    assert np.allclose(pre.delta_position, 0.5 * a * T * T, atol=1e-9)
    assert pre.duration == pytest.approx(T)


def test_rotating_preintegration_matches_dense_reference():
    # independent oracle: very fine re-integration of the same signal
    w = np.array([0.2, -0.1, 0.4])
    a = np.array([0.5, 0.2, 9.5])

    def integrate(n_steps, T):
        samples = make_samples(n_steps + 1, T / n_steps, lambda t: w, lambda t: a)
        return preintegrate(samples, ZERO, ZERO, NOISE)

    coarse = integrate(100, 0.5)
    half = integrate(200, 0.5)
    fine = integrate(6400, 0.5)
    assert np.allclose(coarse.delta_rotation, fine.delta_rotation, atol=1e-8)
    assert np.allclose(coarse.delta_velocity, fine.delta_velocity, atol=1e-5)
    assert np.allclose(coarse.delta_position, fine.delta_position, atol=1e-5)
    # second-order scheme: halving dt shrinks the error by ~4x
    err_c = np.linalg.norm(coarse.delta_position - fine.delta_position)
    err_h = np.linalg.norm(half.delta_position - fine.delta_position)
    assert err_h < 0.35 * err_c


def test_bias_jacobians_match_finite_differences():
    rng = np.random.default_rng(10)
    eps = 1e-5
    for _ in range(10):
        w = rng.normal(0, 0.3, 3)
        a = rng.normal(0, 1.0, 3) + np.array([0, 0, 9.81])
        samples = make_samples(40, 0.005, lambda t: w + 0.1 * np.sin(t) * np.ones(3), lambda t: a + 0.2 * np.cos(t) * np.ones(3))
        ba = rng.normal(0, 0.05, 3)
        bg = rng.normal(0, 0.01, 3)
        pre = preintegrate(samples, ba, bg, NOISE)

        from cloudloc.se3 import quat_conjugate, quat_multiply, so3_log

        for col in range(6):
            d = np.zeros(6)
            d[col] = eps
            pre_p = preintegrate(samples, ba + d[:3], bg + d[3:], NOISE)
            pre_m = preintegrate(samples, ba - d[:3], bg - d[3:], NOISE)
            dR_num = (
                so3_log(quat_multiply(quat_conjugate(pre.delta_rotation), pre_p.delta_rotation))
                - so3_log(quat_multiply(quat_conjugate(pre.delta_rotation), pre_m.delta_rotation))
            ) / (2 * eps)
            dp_num = (pre_p.delta_position - pre_m.delta_position) / (2 * eps)
            dv_num = (pre_p.delta_velocity - pre_m.delta_velocity) / (2 * eps)
            num = np.concatenate([dR_num, dp_num, dv_num])
            ana = pre.bias_jacobians[:, col]
            scale = max(np.max(np.abs(num)), 1.0)
            assert np.max(np.abs(ana - num)) / scale < 1e-4


def test_info_matrices_positive_definite():
    samples = make_samples(60, 0.005, lambda t: [0.1, 0.0, 0.3], lambda t: [0.2, 0.1, 9.8])
    pre = preintegrate(samples, ZERO, ZERO, NOISE)
    assert np.all(np.linalg.eigvalsh(pre.info) > 0)
    assert np.all(np.linalg.eigvalsh(pre.bias_info) > 0)
    assert np.allclose(pre.info, pre.info.T)


def test_non_monotone_timestamps_rejected():
    samples = [
        ImuSample(0.0, ZERO, ZERO),
        ImuSample(0.01, ZERO, ZERO),
        ImuSample(0.005, ZERO, ZERO),
    ]
    with pytest.raises(EmptyInterval):
        preintegrate(samples, ZERO, ZERO, NOISE)
