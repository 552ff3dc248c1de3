"""Geometry primitives: containment, rotated IoU, NMS, transforms."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pieforge.geometry import (
    Box3D,
    Detection,
    PointCloud,
    bev_iou,
    iou_3d,
    nms,
    normalize_yaw,
    points_in_box,
    transform_points,
)

from oracles import brute_force_nms, mc_bev_iou, mc_iou_3d, random_box, random_box_pair


def boxes_strategy():
    finite = st.floats(-10.0, 10.0, allow_nan=False)
    size = st.floats(0.3, 6.0, allow_nan=False)
    yaw = st.floats(-math.pi, math.pi, allow_nan=False)
    return st.builds(Box3D, finite, finite, finite, size, size, size, yaw)


class TestBox3D:
    def test_yaw_normalized_into_half_open_interval(self):
        assert Box3D(0, 0, 0, 1, 1, 1, math.pi).yaw == math.pi
        assert Box3D(0, 0, 0, 1, 1, 1, -math.pi).yaw == math.pi
        assert abs(Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi / 2).yaw + math.pi / 2) < 1e-12

    def test_rejects_nonpositive_sizes(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 0.0, 1, 1, 0)
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, -2, 1, 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Box3D(float("nan"), 0, 0, 1, 1, 1, 0)

    def test_heading_flip_is_a_distinct_box(self):
        a = Box3D(0, 0, 0, 4, 2, 1, 0.3)
        b = Box3D(0, 0, 0, 4, 2, 1, 0.3 + math.pi)
        assert a != b
        assert bev_iou(a, b) == pytest.approx(1.0)


class TestPointCloud:
    def test_intensity_clamped_on_ingest(self):
        cloud = PointCloud(np.array([[0, 0, 0, 1.7], [0, 0, 0, -0.2]], dtype=np.float32))
        assert cloud.intensity.tolist() == [1.0, 0.0]

    def test_rejects_non_finite_coordinates(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[np.nan, 0, 0, 0]], dtype=np.float32))

    def test_order_preserved(self, rng):
        data = rng.uniform(-1, 1, size=(64, 4)).astype(np.float32)
        data[:, 3] = np.abs(data[:, 3])
        cloud = PointCloud(data)
        assert np.array_equal(cloud.data, data)


class TestPointsInBox:
    def test_center_containment(self):
        cloud = PointCloud.from_points([(0.0, 0.0, 0.0, 0.0)])
        box = Box3D(0, 0, 0, 2, 2, 2, 0)
        assert len(points_in_box(cloud, box)) == 1

    def test_outside_half_extent(self):
        cloud = PointCloud.from_points([(1.01, 0.0, 0.0, 0.0)])
        box = Box3D(0, 0, 0, 2, 2, 2, 0)
        assert len(points_in_box(cloud, box)) == 0

    def test_rotated_half_extent(self):
        # at yaw pi/2 the x half-extent becomes w/2 = 0.5, so 1.2 is outside
        cloud = PointCloud.from_points([(1.2, 0.0, 0.0, 0.0)])
        box = Box3D(0, 0, 0, 4, 1, 1, math.pi / 2)
        assert len(points_in_box(cloud, box)) == 0

    def test_boundary_points_included(self):
        cloud = PointCloud.from_points([(1.0, 1.0, 1.0, 0.0)])
        box = Box3D(0, 0, 0, 2, 2, 2, 0)
        assert len(points_in_box(cloud, box)) == 1

    def test_order_preserved_and_subset(self, rng):
        data = rng.uniform(-3, 3, size=(500, 4)).astype(np.float32)
        data[:, 3] = 0.5
        cloud = PointCloud(data)
        box = Box3D(0.5, -0.25, 0.0, 2.5, 1.5, 2.0, 0.7)
        inside = points_in_box(cloud, box)
        rows = {tuple(r) for r in inside.data.tolist()}
        seen = [tuple(r) for r in cloud.data.tolist() if tuple(r) in rows]
        assert [tuple(r) for r in inside.data.tolist()] == seen

    def test_invariant_under_rigid_transform(self, rng):
        data = rng.uniform(-4, 4, size=(400, 4))
        cloud = PointCloud(data.astype(np.float32))
        box = random_box(rng, span=2.0)
        before = points_in_box(cloud, box)

        rot, trans = 0.83, (1.5, -2.0, 0.25)
        moved = cloud.data.astype(np.float64)
        moved[:, :3] = transform_points(moved[:, :3], 1.0, rot, trans)
        moved_cloud = PointCloud(moved.astype(np.float32))
        c, s = math.cos(rot), math.sin(rot)
        moved_box = Box3D(
            c * box.cx - s * box.cy + trans[0],
            s * box.cx + c * box.cy + trans[1],
            box.cz + trans[2],
            box.l, box.w, box.h, box.yaw + rot,
        )
        after = points_in_box(moved_cloud, moved_box)
        assert len(before) == len(after)


class TestBevIoU:
    def test_identical(self):
        box = Box3D(1, 2, 0, 3, 2, 1.5, 0.4)
        assert bev_iou(box, box) == pytest.approx(1.0)

    def test_disjoint_along_axis(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(2.0, 0, 0, 2, 2, 2, 0)  # offset == (l_a + l_b) / 2: touching
        assert bev_iou(a, b) == 0.0
        assert bev_iou(a, Box3D(5, 0, 0, 2, 2, 2, 0)) == 0.0

    def test_axis_aligned_third(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(1, 0, 0, 2, 2, 2, 0)
        assert bev_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert mc_bev_iou(a, b, seed=1) == pytest.approx(1.0 / 3.0, abs=1e-3)

    def test_rotated_square_gives_one(self):
        a = Box3D(0, 0, 0, 2, 2, 1, 0)
        b = Box3D(0, 0, 0, 2, 2, 1, math.pi / 2)
        assert bev_iou(a, b) == pytest.approx(1.0)

    def test_against_monte_carlo(self, rng):
        for i in range(25):
            a, b = random_box_pair(rng)
            assert bev_iou(a, b) == pytest.approx(mc_bev_iou(a, b, seed=i), abs=1e-3)


class TestIoU3D:
    def test_identical(self):
        box = Box3D(1, 2, 0.5, 3, 2, 1.5, -0.4)
        assert iou_3d(box, box) == pytest.approx(1.0)

    def test_z_disjoint(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(0, 0, 3, 2, 2, 2, 0)
        assert iou_3d(a, b) == 0.0

    def test_offset_cube_third(self):
        # inter = 1*2*2 = 4, union = 8 + 8 - 4 = 12 (Monte-Carlo confirmed)
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(1, 0, 0, 2, 2, 2, 0)
        assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert mc_iou_3d(a, b, seed=2) == pytest.approx(1.0 / 3.0, abs=1e-3)

    def test_against_monte_carlo(self, rng):
        for i in range(25):
            a, b = random_box_pair(rng)
            assert iou_3d(a, b) == pytest.approx(mc_iou_3d(a, b, seed=i), abs=1e-3)


@given(boxes_strategy(), boxes_strategy())
@settings(max_examples=150, deadline=None)
def test_iou_bounds_and_symmetry(a, b):
    for fn in (bev_iou, iou_3d):
        v = fn(a, b)
        assert 0.0 <= v <= 1.0
        assert fn(b, a) == v


class TestNms:
    def test_duplicate_suppressed(self):
        box = Box3D(0, 0, 0, 2, 2, 2, 0)
        dets = [Detection(box, 1, cls_score=0.9), Detection(box, 1, cls_score=0.8)]
        kept = nms(dets, 0.5)
        assert kept == [dets[0]]

    def test_disjoint_all_kept(self):
        dets = [
            Detection(Box3D(0, 0, 0, 2, 2, 2, 0), 1, cls_score=0.7),
            Detection(Box3D(10, 0, 0, 2, 2, 2, 0), 1, cls_score=0.9),
        ]
        kept = nms(dets, 0.5)
        assert len(kept) == 2
        assert kept[0].cls_score == 0.9  # sorted by descending score

    def test_tie_broken_by_lower_index(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0)
        b = Box3D(0.1, 0, 0, 2, 2, 2, 0)
        dets = [Detection(a, 1, cls_score=0.8), Detection(b, 1, cls_score=0.8)]
        kept = nms(dets, 0.5)
        assert kept == [dets[0]]

    def test_matches_brute_force_reference(self, rng):
        for trial in range(20):
            dets = [
                Detection(random_box(rng), 1, cls_score=float(rng.random()))
                for _ in range(50)
            ]
            got = nms(dets, 0.3, metric="bev")
            want = brute_force_nms(dets, 0.3, bev_iou)
            assert got == want
            got3 = nms(dets, 0.3, metric="3d")
            want3 = brute_force_nms(dets, 0.3, iou_3d)
            assert got3 == want3

    def test_survivors_below_threshold_pairwise(self, rng):
        dets = [Detection(random_box(rng, span=4), 1, cls_score=float(rng.random())) for _ in range(40)]
        kept = nms(dets, 0.25)
        ids = {id(d) for d in kept}
        assert ids <= {id(d) for d in dets}
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert bev_iou(a.box, b.box) <= 0.25

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            nms([], 1.5)


class TestTransformPoints:
    def test_identity(self, rng):
        pts = rng.uniform(-5, 5, size=(20, 3))
        out = transform_points(pts, 1.0, 0.0, (0, 0, 0))
        assert np.allclose(out, pts)

    def test_right_hand_rotation(self):
        out = transform_points(np.array([[1.0, 0.0, 0.0]]), 1.0, math.pi / 2, (0, 0, 0))
        assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-9)

    def test_composition_order_scale_rotate_translate(self):
        # scale 2 then rotate pi/2 then translate: (1,0,0) -> (2,0,0) -> (0,2,0) -> (1,2,0)
        out = transform_points(np.array([[1.0, 0.0, 0.0]]), 2.0, math.pi / 2, (1, 0, 0))
        assert np.allclose(out, [[1.0, 2.0, 0.0]], atol=1e-9)

    def test_distances_preserved_under_rigid_motion(self, rng):
        pts = rng.uniform(-10, 10, size=(60, 3))
        out = transform_points(pts, 1.0, 1.234, (3.0, -2.0, 0.5))
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=-1)
        assert np.allclose(d_in, d_out, atol=1e-9)

    def test_intensity_carried_through(self):
        pts = np.array([[1.0, 2.0, 3.0, 0.7]])
        out = transform_points(pts, 2.0, 0.3, (1, 1, 1))
        assert out[0, 3] == 0.7

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            transform_points(np.zeros((1, 3)), 0.0, 0.0, (0, 0, 0))
        with pytest.raises(ValueError):
            transform_points(np.zeros((1, 3)), (1.0, -1.0, 1.0), 0.0, (0, 0, 0))


def test_normalize_yaw_range():
    for y in np.linspace(-12, 12, 401):
        n = normalize_yaw(float(y))
        assert -math.pi < n <= math.pi
        assert abs(math.sin(n - y)) < 1e-9
