"""External formats: point-cloud binaries, KITTI-style labels, detection
JSON, range crop."""

import json
import math
import struct

import numpy as np
import pytest

from pieforge.classes import default_class_table
from pieforge.geometry import Box3D, Detection, PointCloud
from pieforge.io import (
    FormatError,
    crop_to_range,
    read_cloud,
    read_detections,
    read_labels,
    write_cloud,
    write_detections,
    write_labels,
)

from scenes import box_at

TABLE = default_class_table()


class TestCloudCodec:
    def test_empty_file_is_empty_cloud(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        assert len(read_cloud(p)) == 0

    def test_single_known_point(self, tmp_path):
        p = tmp_path / "one.bin"
        p.write_bytes(struct.pack("<4f", 1.5, -2.0, 0.25, 0.5))
        cloud = read_cloud(p)
        assert len(cloud) == 1
        assert cloud.data.tolist() == [[1.5, -2.0, 0.25, 0.5]]
        assert cloud.frame_id == "one"

    def test_size_not_multiple_of_16_rejected(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 21)
        with pytest.raises(FormatError, match="offset 16"):
            read_cloud(p)

    def test_nan_records_dropped_with_warning(self, tmp_path, caplog):
        p = tmp_path / "nan.bin"
        p.write_bytes(
            struct.pack("<4f", 1, 2, 3, 0.5) + struct.pack("<4f", float("nan"), 0, 0, 0.5)
        )
        with caplog.at_level("WARNING"):
            cloud = read_cloud(p)
        assert len(cloud) == 1
        assert "dropped 1" in caplog.text

    def test_write_read_roundtrip_byte_identical(self, rng, tmp_path):
        data = rng.uniform(-50, 50, size=(257, 4)).astype(np.float32)
        data[:, 3] = rng.uniform(0, 1, size=257).astype(np.float32)
        cloud = PointCloud(data)
        write_cloud(cloud, tmp_path / "a.bin")
        again = read_cloud(tmp_path / "a.bin")
        write_cloud(again, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert np.array_equal(again.data, cloud.data)


class TestLabelCodec:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("")
        assert read_labels(p, TABLE) == []

    def test_unknown_type_skipped(self, tmp_path, caplog):
        p = tmp_path / "l.txt"
        p.write_text(
            "DontCare 0 0 0 0 0 0 0 1 1 1 0 0 0 0\n"
            "car 0 0 0 0 0 0 0 1.6 1.9 4.5 10.0 -3.0 0.8 0.3\n"
        )
        with caplog.at_level("WARNING"):
            dets = read_labels(p, TABLE)
        assert len(dets) == 1
        assert dets[0].class_id == 1
        assert "skipped 1" in caplog.text

    def test_malformed_line_reports_line_number(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("car 0 0 0 0\n")
        with pytest.raises(FormatError, match=":1:"):
            read_labels(p, TABLE)

    def test_non_numeric_field_reports_line(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("car a b c d e f g h i j k l m n\n")
        with pytest.raises(FormatError, match=":1:"):
            read_labels(p, TABLE)

    def test_lidar_frame_roundtrip(self, rng, tmp_path):
        dets = [
            Detection(
                Box3D(
                    float(rng.uniform(-40, 40)), float(rng.uniform(-40, 40)),
                    float(rng.uniform(-2, 2)), 4.5, 1.9, 1.6,
                    float(rng.uniform(-math.pi, math.pi)),
                ),
                cid, cls_score=0.75, iou_score=0.75,
            )
            for cid in (1, 2, 5, 7)
        ]
        p = tmp_path / "l.txt"
        write_labels(dets, p, TABLE)
        again = read_labels(p, TABLE)
        assert len(again) == len(dets)
        for a, b in zip(dets, again):
            assert b.class_id == a.class_id
            assert b.box.cx == pytest.approx(a.box.cx, abs=1e-6)
            assert b.box.cy == pytest.approx(a.box.cy, abs=1e-6)
            assert b.box.cz == pytest.approx(a.box.cz, abs=1e-6)
            assert b.box.l == pytest.approx(a.box.l, abs=1e-6)
            assert b.box.w == pytest.approx(a.box.w, abs=1e-6)
            assert b.box.h == pytest.approx(a.box.h, abs=1e-6)
            assert b.box.yaw == pytest.approx(a.box.yaw, abs=1e-6)
            assert b.cls_score == pytest.approx(a.cls_score, abs=1e-6)

    def test_camera_frame_roundtrip_with_extrinsic(self, tmp_path):
        # camera -> lidar: x_l = z_c, y_l = -x_c, z_l = -y_c (a standard rig)
        extrinsic = np.array(
            [
                [0.0, 0.0, 1.0, 0.2],
                [-1.0, 0.0, 0.0, 0.0],
                [0.0, -1.0, 0.0, -0.1],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )
        det = Detection(Box3D(12.0, -3.0, 0.4, 4.2, 1.8, 1.5, 0.7), 1)
        p = tmp_path / "cam.txt"
        write_labels([det], p, TABLE, extrinsic=extrinsic)
        again = read_labels(p, TABLE, extrinsic=extrinsic)
        assert again[0].box.cx == pytest.approx(12.0, abs=1e-6)
        assert again[0].box.cy == pytest.approx(-3.0, abs=1e-6)
        assert again[0].box.cz == pytest.approx(0.4, abs=1e-6)
        assert again[0].box.yaw == pytest.approx(0.7, abs=1e-6)


class TestDetectionJson:
    def test_roundtrip(self, tmp_path):
        dets = [
            Detection(box_at(1.0, 2.0, yaw=0.3), 1, cls_score=0.9, iou_score=0.8, teacher_id=2),
            Detection(box_at(-4.0, 0.5), 5, cls_score=0.6, iou_score=0.55, ambiguous=True),
        ]
        p = tmp_path / "d.json"
        write_detections(p, "frame42", dets)
        frame_id, again = read_detections(p)
        assert frame_id == "frame42"
        assert again == dets

    def test_schema_enforced(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text(json.dumps({"schema": "mpgen/2", "detections": []}))
        with pytest.raises(FormatError, match="mpgen/1"):
            read_detections(p)

    def test_invalid_json_positioned(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text("{broken")
        with pytest.raises(FormatError, match="line 1"):
            read_detections(p)

    def test_bad_record_indexed(self, tmp_path):
        p = tmp_path / "d.json"
        p.write_text(
            json.dumps(
                {
                    "schema": "mpgen/1",
                    "frame_id": "f",
                    "detections": [{"class_id": 1, "box": [0, 0, 0, 1, 1, 1]}],
                }
            )
        )
        with pytest.raises(FormatError, match="#0"):
            read_detections(p)

    def test_write_deterministic(self, tmp_path):
        dets = [Detection(box_at(1.0, 2.0), 1, cls_score=0.9)]
        write_detections(tmp_path / "a.json", "f", dets)
        write_detections(tmp_path / "b.json", "f", dets)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestCrop:
    RANGE = (0.0, -40.0, 70.4, 40.0, -3.0, 1.0)

    def test_infinite_range_is_identity(self, rng):
        data = rng.uniform(-30, 30, size=(100, 4)).astype(np.float32)
        data[:, 3] = 0.5
        cloud = PointCloud(data)
        labels = [Detection(box_at(5, 5), 1)]
        inf = (-1e9, -1e9, 1e9, 1e9, -1e9, 1e9)
        out_cloud, out_labels = crop_to_range(cloud, labels, inf)
        assert out_cloud.same_points(cloud)
        assert out_labels == labels

    def test_all_outside_empty(self):
        cloud = PointCloud(np.array([[-5.0, 0, 0, 0.5]], dtype=np.float32))
        labels = [Detection(box_at(-5, 0), 1)]
        out_cloud, out_labels = crop_to_range(cloud, labels, self.RANGE)
        assert len(out_cloud) == 0
        assert out_labels == []

    def test_surviving_points_within_range(self, rng):
        data = rng.uniform(-80, 80, size=(500, 4)).astype(np.float32)
        data[:, 3] = 0.5
        cloud = PointCloud(data)
        out_cloud, _ = crop_to_range(cloud, [], self.RANGE)
        x0, y0, x1, y1, z0, z1 = self.RANGE
        xyz = out_cloud.xyz
        assert (xyz[:, 0] >= x0).all() and (xyz[:, 0] <= x1).all()
        assert (xyz[:, 1] >= y0).all() and (xyz[:, 1] <= y1).all()
        assert (xyz[:, 2] >= z0).all() and (xyz[:, 2] <= z1).all()

    def test_label_kept_by_center(self):
        labels = [Detection(box_at(69.0, 0.0, size=(6.0, 2.0, 2.0)), 1)]
        _, out_labels = crop_to_range(PointCloud.empty(), labels, self.RANGE)
        assert out_labels == labels  # center inside even if the box pokes out

    def test_malordered_range_rejected(self):
        with pytest.raises(ValueError):
            crop_to_range(PointCloud.empty(), [], (5, 0, -5, 10, 0, 1))
