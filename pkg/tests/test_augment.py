"""Weak augmentation, pie partitioning, and point compensation."""

import math

import numpy as np
import pytest

from pieforge.augment import (
    WeakAugRecord,
    apply_weak_record,
    compensate,
    donate_points,
    invert_weak_record,
    partition_pies,
    pie_id,
    pieaug_frame,
    weak_augment,
)
from pieforge.geometry import Box3D, Detection, PointCloud, points_in_box

from oracles import random_box
from scenes import box_at, cloud_in_box, scene_with


class TestPieId:
    def test_north_center(self):
        assert pie_id(box_at(0.0, 1.0), 45) == 4

    def test_east_center(self):
        assert pie_id(box_at(1.0, 0.0), 45) == 6

    def test_full_sweep_even_partition(self):
        counts = [0] * 8
        for i in range(360):
            angle = math.radians(i + 0.5)
            counts[pie_id(box_at(10 * math.cos(angle), 10 * math.sin(angle)), 45)] += 1
        assert counts == [45] * 8

    def test_origin_box_flagged_to_sector_zero(self, caplog):
        with caplog.at_level("WARNING"):
            assert pie_id(box_at(0.0, 0.0), 45) == 0
        assert "origin" in caplog.text

    def test_boundary_edge_maps_to_last_sector(self):
        # atan2(0, -1) = pi -> 360 degrees -> clamped into sector 7
        assert pie_id(box_at(0.0, -1.0), 45) == 7

    def test_deg_must_divide_360(self):
        with pytest.raises(ValueError):
            pie_id(box_at(1, 1), 7)
        with pytest.raises(ValueError):
            pie_id(box_at(1, 1), 0)


class TestPartitionPies:
    def test_norm_density_is_mean_points_per_object(self, rng):
        a = box_at(10.0, 0.1, yaw=0.2)
        b = box_at(10.0, 4.0, yaw=-0.4)
        cloud, labels = scene_with([(a, 100, 1), (b, 50, 1)], rng)
        pies = partition_pies(labels, cloud, 45)
        assert len(pies) == 1
        assert pies[0].norm_density == pytest.approx(75.0)

    def test_single_object_density(self, rng):
        a = box_at(5.0, 5.0)
        cloud, labels = scene_with([(a, 37, 2)], rng)
        pies = partition_pies(labels, cloud, 45)
        assert pies[0].norm_density == pytest.approx(37.0)

    def test_partition_is_exhaustive_and_disjoint(self, rng):
        objects = []
        taken = []
        for cid in (1, 2, 3):
            for _ in range(6):
                for _ in range(50):
                    box = random_box(rng, span=20.0, max_size=3.0)
                    if all(
                        math.hypot(box.cx - t.cx, box.cy - t.cy) > 8.0 for t in taken
                    ):
                        break
                taken.append(box)
                objects.append((box, int(rng.integers(1, 80)), cid))
        cloud, labels = scene_with(objects, rng)
        pies = partition_pies(labels, cloud, 45)
        seen = [d for pie in pies for d, _ in pie.objects]
        with_points = [d for d in labels if len(points_in_box(cloud, d.box)) > 0]
        assert len(seen) == len(set(id(d) for d in seen))
        assert {id(d) for d in seen} == {id(d) for d in with_points}
        for pie in pies:
            for det, _ in pie.objects:
                assert pie_id(det.box, 45) == pie.pie_id

    def test_sorted_by_descending_density(self, rng):
        objects = [
            (box_at(10, 0.1), 10, 1),
            (box_at(0.1, 10), 90, 1),
            (box_at(-10, 0.1), 40, 1),
        ]
        cloud, labels = scene_with(objects, rng)
        pies = partition_pies(labels, cloud, 45)
        densities = [p.norm_density for p in pies]
        assert densities == sorted(densities, reverse=True)

    def test_zero_point_labels_omitted(self, rng):
        lonely = Detection(box_at(30.0, 30.0), 1)
        a = box_at(10, 0.1)
        cloud, labels = scene_with([(a, 20, 1)], rng)
        pies = partition_pies(labels + [lonely], cloud, 45)
        assert sum(len(p.objects) for p in pies) == 1


class TestWeakAugment:
    def test_deterministic_given_seed(self, rng):
        cloud, labels = scene_with([(box_at(8, 3, yaw=0.3), 50, 1)], rng)
        c1, l1, r1 = weak_augment(cloud, labels, 123)
        c2, l2, r2 = weak_augment(cloud, labels, 123)
        assert r1 == r2
        assert c1.same_points(c2)
        assert l1 == l2

    def test_identity_record_is_identity(self, rng):
        cloud, labels = scene_with([(box_at(8, 3), 30, 1)], rng)
        c, l = apply_weak_record(cloud, labels, WeakAugRecord())
        assert c.same_points(cloud)
        assert l == labels

    def test_flip_x_involution(self, rng):
        cloud, labels = scene_with([(box_at(8, 3, yaw=0.8), 30, 1)], rng)
        record = WeakAugRecord(flip_x=True)
        c1, l1 = apply_weak_record(cloud, labels, record)
        c2, l2 = apply_weak_record(c1, l1, record)
        assert np.allclose(c2.data, cloud.data, atol=1e-9)
        assert l2[0].box.cy == pytest.approx(labels[0].box.cy, abs=1e-9)
        assert l2[0].box.yaw == pytest.approx(labels[0].box.yaw, abs=1e-9)

    def test_flip_y_adjusts_yaw(self):
        det = Detection(box_at(3, 2, yaw=0.4), 1)
        _, labels = apply_weak_record(PointCloud.empty(), [det], WeakAugRecord(flip_y=True))
        assert labels[0].box.cx == -3
        assert labels[0].box.yaw == pytest.approx(math.pi - 0.4)

    def test_record_is_invertible(self, rng):
        cloud, labels = scene_with([(box_at(8, 3, yaw=1.1), 60, 2)], rng)
        aug_cloud, aug_labels, record = weak_augment(cloud, labels, 7)
        back_cloud, back_labels = invert_weak_record(aug_cloud, aug_labels, record)
        assert np.allclose(back_cloud.data, cloud.data, atol=1e-5)
        assert back_labels[0].box.cx == pytest.approx(labels[0].box.cx, abs=1e-9)
        assert back_labels[0].box.l == pytest.approx(labels[0].box.l, abs=1e-9)

    def test_foreground_counts_preserved(self, rng):
        objects = [
            (box_at(10, 0.1, yaw=0.2), 40, 1),
            (box_at(-6, 7, yaw=-0.9), 25, 2),
            (box_at(3, -12, yaw=2.2), 70, 3),
        ]
        cloud, labels = scene_with(objects, rng)
        for seed in range(8):
            aug_cloud, aug_labels, _ = weak_augment(cloud, labels, seed)
            for before, after in zip(labels, aug_labels):
                n_before = len(points_in_box(cloud, before.box))
                n_after = len(points_in_box(aug_cloud, after.box))
                assert n_before == n_after


class TestCompensate:
    def test_donation_count_arithmetic(self, rng):
        donor_box = box_at(5, 0.1)
        target_box = box_at(-5, -0.1, size=(1.5, 1.5, 1.5), yaw=0.9)
        cloud, labels = scene_with([(donor_box, 200, 1), (target_box, 10, 1)], rng)
        pies = partition_pies(labels, cloud, 45)
        assert len(pies) == 2
        bank, stats = compensate(pies)
        by_box = {obj.label.box: obj for obj in bank}
        assert len(by_box[target_box].points) == 210
        assert len(by_box[donor_box].points) == 200
        assert stats.objects_donated == 1
        assert stats.points_added == 200

    def test_single_pie_passthrough(self, rng):
        a = box_at(5, 0.1)
        cloud, labels = scene_with([(a, 42, 1)], rng)
        pies = partition_pies(labels, cloud, 45)
        bank, stats = compensate(pies)
        assert len(bank) == 1
        assert len(bank[0].points) == 42
        assert stats.objects_passthrough == 1
        assert stats.objects_donated == 0

    def test_donated_points_lie_inside_target_box(self, rng):
        donor_box = box_at(6, 0.1, size=(4.0, 2.0, 1.5), yaw=0.4)
        target_box = box_at(-7, -0.1, size=(1.0, 3.0, 2.5), yaw=-1.2)
        donor_pts = cloud_in_box(donor_box, 150, rng)
        target_pts = cloud_in_box(target_box, 5, rng)
        enriched = donate_points(
            (Detection(donor_box, 1), donor_pts), (Detection(target_box, 1), target_pts)
        )
        assert len(enriched) == 155
        assert len(points_in_box(enriched, target_box)) == 155
        # target's own points come first, order preserved
        assert np.array_equal(enriched.data[:5], target_pts.data)

    def test_cross_class_pair_does_not_donate(self, rng):
        donor_box = box_at(5, 0.1)
        target_box = box_at(-5, -0.1)
        cloud, labels = scene_with([(donor_box, 100, 1), (target_box, 10, 2)], rng)
        bank, stats = compensate(partition_pies(labels, cloud, 45))
        by_box = {obj.label.box: obj for obj in bank}
        assert len(by_box[target_box].points) == 10
        assert stats.class_mismatches == 1
        assert stats.objects_donated == 0

    def test_conservation_over_random_scenes(self, rng):
        for _ in range(10):
            objects = []
            taken = []
            for _ in range(12):
                for _ in range(60):
                    box = random_box(rng, span=25.0, max_size=3.0)
                    if all(math.hypot(box.cx - t.cx, box.cy - t.cy) > 9 for t in taken):
                        break
                taken.append(box)
                objects.append((box, int(rng.integers(1, 120)), int(rng.integers(1, 4))))
            cloud, labels = scene_with(objects, rng)
            pies = partition_pies(labels, cloud, 45)
            original = {
                id(det): len(pts) for pie in pies for det, pts in pie.objects
            }
            boxes_before = {id(det): det.box for pie in pies for det, _ in pie.objects}
            bank, _ = compensate(pies)
            for obj in bank:
                assert len(obj.points) >= original[id(obj.label)]
                assert obj.label.box == boxes_before[id(obj.label)]

    def test_zero_point_donor_skipped(self, rng):
        from pieforge.augment import Pie

        donor_box = box_at(5, 0.1)
        target_box = box_at(-5, -0.1)
        dense = Pie(0, [(Detection(donor_box, 1), PointCloud.empty())])
        sparse = Pie(4, [(Detection(target_box, 1), cloud_in_box(target_box, 9, rng))])
        bank, stats = compensate([dense, sparse])
        by_box = {obj.label.box: obj for obj in bank}
        assert len(by_box[target_box].points) == 9
        assert stats.zero_point_donors == 1


def test_pieaug_frame_roundup(rng):
    objects = [
        (box_at(10, 0.1), 80, 1),
        (box_at(0.1, 10), 15, 1),
        (box_at(-10, 0.1), 40, 2),
    ]
    cloud, labels = scene_with(objects, rng)
    bank, stats, pies = pieaug_frame(cloud, labels, 45.0)
    assert stats.pairs_processed == 1
    assert len(pies) == 3
    assert len(bank) >= 3  # 2 paired + leftover
