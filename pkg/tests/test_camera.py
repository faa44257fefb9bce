import numpy as np
import pytest

from cloudloc.camera import PinholeCamera, forward_facing_extrinsic
from cloudloc.errors import BehindCamera


def test_optical_axis_projects_to_principal_point():
    cam = PinholeCamera(fx=100.0, fy=100.0, cx=0.0, cy=0.0)
    assert np.allclose(cam.project(np.array([0.0, 0.0, 1.0])), [0.0, 0.0])


def test_hand_evaluated_pinhole():
    cam = PinholeCamera(fx=100.0, fy=120.0, cx=320.0, cy=240.0)
    uv = cam.project(np.array([1.0, 0.0, 2.0]))
    assert np.allclose(uv, [370.0, 240.0])


def test_zero_depth_raises():
    cam = PinholeCamera()
    with pytest.raises(BehindCamera):
        cam.project(np.array([0.1, 0.1, 0.0]))
    with pytest.raises(BehindCamera):
        cam.project(np.array([0.1, 0.1, -1.0]))


def test_projection_jacobian_matches_finite_differences():
    cam = PinholeCamera(fx=460.0, fy=450.0, cx=320.0, cy=240.0)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(100):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5.0)])
        J = cam.project_jacobian(p)
        num = np.zeros((2, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = eps
            num[:, k] = (cam.project(p + d) - cam.project(p - d)) / (2 * eps)
        assert np.max(np.abs(J - num)) / np.max(np.abs(num)) < 1e-5


def test_project_many_matches_scalar_bitwise():
    cam = PinholeCamera()
    rng = np.random.default_rng(1)
    pts = np.column_stack(
        [rng.uniform(-2, 2, 100), rng.uniform(-2, 2, 100), rng.uniform(0.1, 8.0, 100)]
    )
    uv, valid = cam.project_many(pts)
    assert valid.all()
    for i in range(100):
        assert np.array_equal(uv[i], cam.project(pts[i]))


def test_project_many_flags_bad_depth():
    cam = PinholeCamera()
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.0, 0.0, 0.01]])
    uv, valid = cam.project_many(pts)
    assert valid.tolist() == [True, False, False]
    assert np.isnan(uv[1]).all() and np.isnan(uv[2]).all()


def test_forward_extrinsic_maps_body_forward_to_camera_z():
    t_cb = forward_facing_extrinsic()
    p_c = t_cb.act(np.array([2.0, 0.0, 0.0]))
    assert np.allclose(p_c, [0.0, 0.0, 2.0])
    # body up maps to camera -y (image up)
    assert np.allclose(t_cb.act(np.array([0.0, 0.0, 1.0])), [0.0, -1.0, 0.0])


def test_forward_extrinsic_lever_arm():
    offset = np.array([0.05, 0.0, 0.02])
    t_cb = forward_facing_extrinsic(offset)
    # the camera origin expressed in the body frame is the offset
    assert np.allclose(t_cb.inverse().t, offset)
