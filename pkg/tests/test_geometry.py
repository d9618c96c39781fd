import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereolidar.geometry import (
    Box3D,
    CameraCalib,
    GeometryError,
    box_corners,
    fit_box,
    frustum_from_box2d,
    intersect_frustums,
    iou_3d,
    iou_bev,
    points_in_box3d,
    points_in_region,
    project_points,
    project_rect,
    resize_box,
)
from stereolidar.synthetic import kitti_like_calib


def _unit_calib(f=1.0) -> CameraCalib:
    P = np.array([[f, 0.0, 0.0, 0.0], [0.0, f, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    # identity LIDAR -> camera so points are given directly in camera axes
    return CameraCalib(P, P.copy(), np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


def test_on_axis_point_projects_to_principal_point():
    uv, depth = project_points(_unit_calib(), "left", np.array([[0.0, 0.0, 10.0]]))[:2]
    assert np.allclose(uv, [[0.0, 0.0]]) and depth[0] == 10.0


def test_points_behind_camera_are_invalid():
    uv, _, valid = project_rect(_unit_calib().P_left, np.array([[0.0, 0.0, -1.0], [1.0, 1.0, 2.0]]))
    assert list(valid) == [False, True] and np.all(np.isnan(uv[0]))


def test_frustum_corners_reproject_into_box():
    calib = kitti_like_calib()
    box2d = (500.0, 150.0, 640.0, 220.0)
    fr = frustum_from_box2d(calib, "left", box2d, (5.0, 30.0))
    uv, _, valid = project_rect(calib.P_left, fr.corners)
    assert valid.all()
    assert np.all(uv[:, 0] >= box2d[0] - 0.5) and np.all(uv[:, 0] <= box2d[2] + 0.5)
    assert np.all(uv[:, 1] >= box2d[1] - 0.5) and np.all(uv[:, 1] <= box2d[3] + 0.5)
    assert points_in_region(fr.corners, fr).all()
    assert not points_in_region(np.array([[0.0, 0.0, 31.0]]), fr).any()


def test_frustum_volume_matches_truncated_pyramid():
    fr = frustum_from_box2d(_unit_calib(), "left", (-0.1, -0.1, 0.1, 0.1), (2.0, 5.0))
    # square side s(z) = 0.2 z, volume = 0.04 (z1^3 - z0^3) / 3
    expected = 0.04 * (5.0**3 - 2.0**3) / 3.0
    assert fr.volume() == pytest.approx(expected, rel=1e-6)


def test_shrunk_box_frustum_is_contained():
    calib = kitti_like_calib()
    outer = frustum_from_box2d(calib, "left", (500, 150, 640, 220), (5.0, 30.0))
    inner = frustum_from_box2d(calib, "left", (520, 160, 620, 210), (6.0, 25.0))
    rng = np.random.default_rng(0)
    lo, hi = inner.corners.min(axis=0), inner.corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(20000, 3))
    inside = points_in_region(pts, inner)
    assert inside.any()
    assert points_in_region(pts[inside], outer).all()


def test_degenerate_inputs_raise():
    calib = kitti_like_calib()
    with pytest.raises(GeometryError):
        frustum_from_box2d(calib, "left", (10, 10, 10, 20), (5, 10))
    with pytest.raises(GeometryError):
        frustum_from_box2d(calib, "left", (10, 10, 20, 20), (10, 5))


def test_intersect_is_idempotent_and_disjoint_depths_are_empty():
    calib = kitti_like_calib()
    f = frustum_from_box2d(calib, "left", (500, 150, 640, 220), (5.0, 30.0))
    ff = intersect_frustums(f, f)
    rng = np.random.default_rng(1)
    pts = rng.uniform(f.corners.min(axis=0) - 1, f.corners.max(axis=0) + 1, size=(10000, 3))
    assert np.array_equal(points_in_region(pts, ff), points_in_region(pts, f))
    near = frustum_from_box2d(calib, "left", (500, 150, 640, 220), (5.0, 10.0))
    far = frustum_from_box2d(calib, "right", (400, 150, 640, 220), (12.0, 30.0))
    fused = intersect_frustums(near, far)
    assert fused.empty and fused.volume() == 0.0
    assert not points_in_region(pts, fused).any()


def test_resize_box():
    b = Box3D(1.0, 2.0, 10.0, 1.6, 1.5, 3.9, 0.3)
    assert resize_box(b, 0.0) == b
    r = resize_box(b, -0.5)
    assert (r.w, r.h, r.l) == pytest.approx((1.1, 1.0, 3.4), abs=1e-12)
    assert (r.x, r.y, r.z, r.theta) == (b.x, b.y, b.z, b.theta)
    with pytest.raises(GeometryError):
        resize_box(Box3D(0, 0, 0, 1, 1, 1, 0), -2.0)


def test_unit_cube_corners():
    cube = Box3D(0.0, 0.5, 0.0, 1.0, 1.0, 1.0, 0.0)  # bottom centre at y=0.5 puts the centre at the origin
    c = box_corners(cube)
    assert sorted(map(tuple, np.round(c, 12))) == sorted(
        (x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5))
    assert points_in_box3d(cube.center[None, :], cube).all()


def test_iou_analytic_cases():
    a = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    b = Box3D(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    assert iou_bev(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_bev(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou_3d(a, Box3D(0.0, -2.0, 0.0, 1.0, 1.0, 1.0, 0.0)) == 0.0


def test_iou_is_invariant_to_quarter_turn_relabelling():
    a = Box3D(0.3, 0.0, 1.0, 1.5, 1.2, 3.5, 0.4)
    swapped = Box3D(0.3, 0.0, 1.0, 3.5, 1.2, 1.5, 0.4 + math.pi / 2)
    b = Box3D(0.8, 0.2, 1.5, 1.6, 1.5, 4.0, -0.2)
    assert iou_3d(a, b) == pytest.approx(iou_3d(swapped, b), abs=1e-12)


_box = st.builds(Box3D, st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.3, 4), st.floats(0.3, 4),
                 st.floats(0.3, 4), st.floats(-math.pi, math.pi))


@settings(max_examples=200, deadline=None)
@given(_box, _box)
def test_iou_is_symmetric_and_bounded(a, b):
    ab, ba = iou_3d(a, b), iou_3d(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-9)


def test_fit_box_recovers_rotated_box():
    rng = np.random.default_rng(4)
    box = Box3D(1.0, 1.5, 12.0, 1.7, 1.5, 4.2, 0.6)
    local = rng.uniform([-2.1, -1.5, -0.85], [2.1, 0.0, 0.85], size=(4000, 3))
    c, s = math.cos(box.theta), math.sin(box.theta)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    pts = local @ R.T + box.bottom_center
    fit = fit_box(pts)
    assert iou_3d(fit, box) > 0.97
    with pytest.raises(GeometryError):
        fit_box(np.zeros((0, 3)))
