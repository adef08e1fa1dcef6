"""Depth unprojection, tour accumulation, voxel subsampling and window crops."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reid3d.pointcloud import (CameraFrame, PointCloud, accumulate_tour, crop_sliding_windows, read_binary,
                               read_text, tilt_matrix, unproject_frame, voxel_subsample, write_binary,
                               write_text)


def _frame(depth, fx=1.0, fy=1.0, cx=0.0, cy=0.0, R=None, t=(0.0, 0.0, 0.0), **kw):
    return CameraFrame(np.asarray(depth, dtype=float), fx, fy, cx, cy,
                       np.eye(3) if R is None else R, np.asarray(t, dtype=float), **kw)


def test_single_pixel_identity():
    pc = unproject_frame(_frame([[1.0]]), tilt_deg=0.0, height_cutoff=math.inf)
    np.testing.assert_array_equal(pc.points, [[0.0, 0.0, 1.0]])


def test_invalid_depth_is_dropped():
    assert len(unproject_frame(_frame([[0.0]]), 0.0, math.inf)) == 0


def test_empty_image():
    assert len(unproject_frame(_frame(np.zeros((0, 0))), 0.0, math.inf)) == 0


def test_two_by_two_against_hand_unprojection():
    depth = np.array([[1.0, 2.0], [3.0, 4.0]])
    fx, fy, cx, cy = 2.0, 4.0, 0.5, 0.5
    a = 0.3
    R = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
    t = np.array([1.0, -0.5, 2.0])
    pc = unproject_frame(_frame(depth, fx, fy, cx, cy, R, t), 0.0, math.inf)
    Kinv = np.linalg.inv(np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1]]))
    want = [R @ (depth[v, u] * Kinv @ [u, v, 1.0]) + t for v in range(2) for u in range(2)]
    np.testing.assert_allclose(pc.points, want, atol=1e-12)


def test_tilt_points_optical_axis_down():
    pc = unproject_frame(_frame([[1.0]]), tilt_deg=90.0, height_cutoff=math.inf)
    np.testing.assert_allclose(pc.points, [[0.0, 1.0, 0.0]], atol=1e-12)
    assert np.allclose(tilt_matrix(22.5) @ tilt_matrix(22.5).T, np.eye(3))


def test_height_cutoff():
    # y grows with image row, so a tall column spans heights -1..1
    depth = np.ones((3, 1))
    f = _frame(depth, cy=1.0, camera_height=0.0)
    pc = unproject_frame(f, 0.0, height_cutoff=0.5)
    assert pc.points[:, 1].max() <= 0.5
    assert len(pc) == 2


def test_nonfinite_pose_rejected():
    with pytest.raises(ValueError):
        unproject_frame(_frame([[1.0]], t=(np.nan, 0, 0)))


def test_accumulate_counts():
    assert len(accumulate_tour([])) == 0
    one = _frame([[1.0]])
    assert len(accumulate_tour([one, _frame([[2.0]], t=(5, 0, 0))], 0.0, math.inf)) == 2
    k = _frame(np.ones((2, 3)))
    assert len(accumulate_tour([k, k, k], 0.0, math.inf)) == 18


def test_voxel_examples():
    p = PointCloud([[0.01, 0.01, 0.01]])
    np.testing.assert_array_equal(voxel_subsample(p, 0.03).points, p.points)
    close = PointCloud([[0.010, 0.01, 0.01], [0.011, 0.01, 0.01]])
    np.testing.assert_allclose(voxel_subsample(close, 0.03).points, [[0.0105, 0.01, 0.01]], atol=1e-15)
    far = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert len(voxel_subsample(far, 0.03)) == 2
    with pytest.raises(ValueError):
        voxel_subsample(far, 0.0)


cloud_pts = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)),
                   elements=st.floats(-2, 2, allow_nan=False, allow_infinity=False))


@settings(max_examples=100, deadline=None)
@given(cloud_pts, st.sampled_from([0.03, 0.1, 0.5]))
def test_voxel_idempotent_and_shrinking(pts, res):
    pc = PointCloud(pts)
    once = voxel_subsample(pc, res)
    assert len(once) <= len(pc)
    keys = np.floor(once.points / res)
    assert len(np.unique(keys, axis=0)) == len(once)
    twice = voxel_subsample(once, res)
    np.testing.assert_array_equal(twice.points, once.points)


def test_crops_single_window():
    pc = PointCloud(np.random.default_rng(0).uniform(0, 1, (50, 3)))
    crops = crop_sliding_windows(pc)
    assert len(crops) == 1 and len(crops[0][1]) == 50


def test_crops_cover_six_metres():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0, 6, 400), rng.uniform(0, 2, 400), rng.uniform(0, 3, 400)])
    crops = crop_sliding_windows(PointCloud(pts))
    xs = {round(o[0], 9) for o, _ in crops}
    assert len(xs) >= 2
    seen = np.zeros(len(pts), dtype=bool)
    for _, c in crops:
        for q in c.points:
            seen |= np.all(pts == q, axis=1)
    assert seen.all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
              elements=st.floats(-9, 9, allow_nan=False, allow_infinity=False)))
def test_crops_every_point_covered(pts):
    crops = crop_sliding_windows(PointCloud(pts))
    total = set()
    for _, c in crops:
        total |= {tuple(q) for q in c.points}
    assert {tuple(q) for q in pts} <= total


def test_crop_boundary_point():
    pts = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [8.0, 0.0, 0.0]])
    crops = crop_sliding_windows(PointCloud(pts))
    assert any((c.points == [4.0, 0.0, 0.0]).all(axis=1).any() for _, c in crops)
    assert crop_sliding_windows(PointCloud.empty()) == []


def test_io_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pc = PointCloud(rng.normal(size=(20, 3)), rng.integers(0, 256, (20, 3)) / 255.0)
    write_binary(pc, tmp_path / "c.bin")
    back = read_binary(tmp_path / "c.bin")
    np.testing.assert_array_equal(back.points, pc.points)
    np.testing.assert_allclose(back.colors, pc.colors, atol=1e-12)
    write_text(pc, tmp_path / "c.txt")
    np.testing.assert_array_equal(read_text(tmp_path / "c.txt").points, pc.points)
