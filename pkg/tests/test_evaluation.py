import json

import numpy as np
import pytest

from poseloop.evaluation import (
    ApSummary,
    Dataset,
    GtInstance,
    average_precision,
    format_ap_table,
    format_stratified_table,
    load_annotations,
    load_results,
    max_iou_per_instance,
    stratified_bbox_ap,
)
from poseloop.geometry import BBox, BinaryMask, bbox_iou


def make_dataset(image_boxes, image_size=(100, 100)):
    """image_boxes: {image_id: [(x, y, w, h), ...]}"""
    images = {
        img_id: {"width": image_size[0], "height": image_size[1], "file_name": ""}
        for img_id in image_boxes
    }
    instances = []
    ann_id = 1
    for img_id, boxes in image_boxes.items():
        for b in boxes:
            instances.append(
                GtInstance(
                    id=ann_id,
                    image_id=img_id,
                    bbox=BBox(*b),
                    area=float(b[2] * b[3]),
                )
            )
            ann_id += 1
    return Dataset(images=images, instances=instances)


def det(image_id, box, score):
    return {
        "image_id": image_id,
        "category_id": 1,
        "bbox": list(box),
        "score": score,
    }


def brute_force_ap(gt_boxes, detections, thresholds):
    """Independent matcher + trapezoid-free 101-point AP, straight loops."""
    aps = []
    for t in thresholds:
        rows = []  # (score, is_tp)
        npig = sum(len(v) for v in gt_boxes.values())
        for img_id, boxes in gt_boxes.items():
            dts = sorted(
                (d for d in detections if d["image_id"] == img_id),
                key=lambda d: -d["score"],
            )
            taken = [False] * len(boxes)
            for d in dts:
                best, best_iou = -1, t
                for gi, b in enumerate(boxes):
                    if taken[gi]:
                        continue
                    iou = bbox_iou(BBox(*d["bbox"]), BBox(*b))
                    if iou >= best_iou:
                        best, best_iou = gi, iou
                if best >= 0:
                    taken[best] = True
                    rows.append((d["score"], True))
                else:
                    rows.append((d["score"], False))
        rows.sort(key=lambda r: -r[0])
        tp = fp = 0
        rec_prec = []
        for score, is_tp in rows:
            tp += is_tp
            fp += not is_tp
            rec_prec.append((tp / npig, tp / (tp + fp)))
        ap_points = []
        for r in np.linspace(0, 1, 101):
            candidates = [p for rr, p in rec_prec if rr >= r]
            ap_points.append(max(candidates) if candidates else 0.0)
        aps.append(sum(ap_points) / 101)
    return sum(aps) / len(aps)


class TestAveragePrecision:
    def test_perfect_results_ap_one(self):
        gt = make_dataset({0: [(10, 10, 20, 30)], 1: [(5, 5, 10, 10), (50, 50, 20, 20)]})
        results = [
            det(0, (10, 10, 20, 30), 0.9),
            det(1, (5, 5, 10, 10), 0.8),
            det(1, (50, 50, 20, 20), 0.7),
        ]
        s = average_precision(gt, results, "bbox")
        assert s.ap == pytest.approx(1.0)
        assert s.ap50 == pytest.approx(1.0)
        assert s.ar == pytest.approx(1.0)

    def test_empty_results_ap_zero(self):
        gt = make_dataset({0: [(10, 10, 20, 30)]})
        s = average_precision(gt, [], "bbox")
        assert s.ap == 0.0
        assert s.ar == 0.0

    def test_hand_computed_five_instance_case(self):
        # five ground truths, four found (one of them twice), one missed:
        # sorted detections are TP TP FP TP TP -> AP = 73/101 at every
        # threshold (boxes either coincide or are disjoint)
        gt = make_dataset(
            {0: [(0, 0, 10, 10), (20, 0, 10, 10), (40, 0, 10, 10),
                 (60, 0, 10, 10), (80, 0, 10, 10)]}
        )
        results = [
            det(0, (0, 0, 10, 10), 0.9),
            det(0, (20, 0, 10, 10), 0.8),
            det(0, (0, 0, 10, 10), 0.7),   # duplicate
            det(0, (40, 0, 10, 10), 0.6),
            det(0, (60, 0, 10, 10), 0.5),
        ]
        s = average_precision(gt, results, "bbox")
        assert s.ap == pytest.approx(73 / 101, abs=1e-6)
        gt_boxes = {0: [(0, 0, 10, 10), (20, 0, 10, 10), (40, 0, 10, 10),
                        (60, 0, 10, 10), (80, 0, 10, 10)]}
        oracle = brute_force_ap(gt_boxes, results, [0.5, 0.75, 0.95])
        assert s.ap == pytest.approx(oracle, abs=1e-9)

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            gt_boxes = {}
            detections = []
            for img_id in range(int(rng.integers(1, 4))):
                boxes = []
                for _ in range(int(rng.integers(0, 5))):
                    boxes.append(
                        (
                            float(rng.integers(0, 60)),
                            float(rng.integers(0, 60)),
                            float(rng.integers(5, 30)),
                            float(rng.integers(5, 30)),
                        )
                    )
                gt_boxes[img_id] = boxes
                for b in boxes:
                    if rng.random() < 0.8:  # found with jitter
                        jit = rng.uniform(-2, 2, size=2)
                        detections.append(
                            det(
                                img_id,
                                (b[0] + jit[0], b[1] + jit[1], b[2], b[3]),
                                float(rng.integers(1, 100)) / 100.0,
                            )
                        )
                if rng.random() < 0.5:  # noise box
                    detections.append(
                        det(
                            img_id,
                            (
                                float(rng.integers(60, 90)),
                                float(rng.integers(60, 90)),
                                5.0,
                                5.0,
                            ),
                            float(rng.integers(1, 100)) / 100.0,
                        )
                    )
            if not any(gt_boxes.values()):
                continue
            gt = make_dataset(gt_boxes)
            thresholds = (0.5, 0.75)
            s = average_precision(gt, detections, "bbox", iou_thresholds=thresholds)
            want = brute_force_ap(gt_boxes, detections, thresholds)
            assert s.ap == pytest.approx(want, abs=1e-9)

    def test_removing_false_positive_never_decreases_ap(self):
        gt = make_dataset({0: [(0, 0, 10, 10), (30, 0, 10, 10)]})
        results = [
            det(0, (0, 0, 10, 10), 0.9),
            det(0, (60, 60, 5, 5), 0.85),  # false positive
            det(0, (30, 0, 10, 10), 0.8),
        ]
        with_fp = average_precision(gt, results, "bbox").ap
        without_fp = average_precision(gt, [results[0], results[2]], "bbox").ap
        assert without_fp >= with_fp

    def test_adding_perfect_match_never_decreases_ap(self):
        gt = make_dataset({0: [(0, 0, 10, 10), (30, 0, 10, 10)]})
        partial = [det(0, (0, 0, 10, 10), 0.9)]
        s0 = average_precision(gt, partial, "bbox").ap
        s1 = average_precision(
            gt, partial + [det(0, (30, 0, 10, 10), 0.5)], "bbox"
        ).ap
        assert s1 >= s0

    def test_crowd_regions_ignored(self):
        gt = make_dataset({0: [(0, 0, 10, 10)]})
        gt.instances.append(
            GtInstance(
                id=99, image_id=0, bbox=BBox(50, 50, 30, 30), area=900.0, iscrowd=True
            )
        )
        gt.by_image = {}
        gt.__post_init__()
        results = [
            det(0, (0, 0, 10, 10), 0.9),
            det(0, (55, 55, 20, 20), 0.8),  # inside the crowd region
        ]
        s = average_precision(gt, results, "bbox")
        assert s.ap == pytest.approx(1.0)  # crowd match is not a false positive

    def test_keypoints_task_perfect(self):
        rng = np.random.default_rng(1)
        kp = np.zeros((17, 3))
        kp[:, 0] = rng.uniform(10, 90, 17)
        kp[:, 1] = rng.uniform(10, 90, 17)
        kp[:, 2] = 2
        gt = make_dataset({0: [(10, 10, 80, 80)]})
        gt.instances[0].keypoints = kp
        gt.instances[0].num_keypoints = 17
        entry = det(0, (10, 10, 80, 80), 0.9)
        entry["keypoints"] = [float(v) for row in kp for v in row]
        s = average_precision(gt, [entry], "keypoints")
        assert s.ap == pytest.approx(1.0)

    def test_segm_task(self):
        m1 = BinaryMask.zeros(100, 100)
        m1.bits[10:40, 10:40] = True
        gt = make_dataset({0: [(10, 10, 30, 30)]})
        gt.instances[0].mask = m1
        entry = det(0, (10, 10, 30, 30), 0.9)
        entry["segmentation"] = m1.to_rle(compressed=True)
        assert average_precision(gt, [entry], "segm").ap == pytest.approx(1.0)
        # shifted mask only overlaps partially: matched at low thresholds only
        m2 = BinaryMask.zeros(100, 100)
        m2.bits[10:40, 25:55] = True
        entry2 = det(0, (25, 10, 30, 30), 0.9)
        entry2["segmentation"] = m2.to_rle(compressed=True)
        s = average_precision(gt, [entry2], "segm")
        assert s.per_threshold[0.5] == 0.0
        assert 0.0 < s.ap < 1.0 or s.ap == 0.0

    def test_unknown_image_rejected(self):
        gt = make_dataset({0: [(0, 0, 10, 10)]})
        with pytest.raises(ValueError):
            average_precision(gt, [det(5, (0, 0, 10, 10), 0.5)], "bbox")


class TestStratified:
    def test_single_person_images_fall_in_first_bin(self):
        gt = make_dataset({0: [(0, 0, 10, 10)], 1: [(5, 5, 20, 20)]})
        assignment = max_iou_per_instance(gt)
        assert all(v == 0.0 for v in assignment.values())
        report = stratified_bbox_ap(gt, [])
        assert report.bins[0].gt_count == 2
        assert sum(b.gt_count for b in report.bins) == 2

    def test_identical_boxes_fall_in_last_bin(self):
        gt = make_dataset({0: [(0, 0, 10, 10), (0, 0, 10, 10)]})
        report = stratified_bbox_ap(gt, [])
        assert report.bins[-1].gt_count == 2

    def test_constructed_pairwise_assignment(self):
        # six instances with hand-computed pairwise overlap
        boxes = [
            (0, 0, 10, 10),     # overlaps next at iou 1/3
            (5, 0, 10, 10),
            (30, 0, 10, 10),    # isolated
            (50, 0, 10, 10),    # overlaps next at (10-2)/(10+2)=0.667 horizontally
            (52, 0, 10, 10),
            (80, 0, 10, 10),    # isolated
        ]
        gt = make_dataset({0: boxes})
        overlap = max_iou_per_instance(gt)
        want = {
            1: 50 / 150,
            2: 50 / 150,
            3: 0.0,
            4: 80 / 120,
            5: 80 / 120,
            6: 0.0,
        }
        for gid, v in want.items():
            assert overlap[gid] == pytest.approx(v)
        report = stratified_bbox_ap(gt, [])
        counts = [b.gt_count for b in report.bins]
        assert counts == [2, 2, 0, 2, 0]

    def test_bins_partition_every_instance(self):
        rng = np.random.default_rng(2)
        image_boxes = {}
        for img in range(5):
            image_boxes[img] = [
                (
                    float(rng.integers(0, 50)),
                    float(rng.integers(0, 50)),
                    float(rng.integers(5, 30)),
                    float(rng.integers(5, 30)),
                )
                for _ in range(int(rng.integers(1, 6)))
            ]
        gt = make_dataset(image_boxes)
        report = stratified_bbox_ap(gt, [])
        assert sum(b.gt_count for b in report.bins) == len(gt.instances)

    def test_cross_bin_detection_not_penalized(self):
        # two overlapping people (last bin) + one isolated (first bin);
        # detecting the overlapped pair must not hurt the first bin's AP
        gt = make_dataset({0: [(0, 0, 10, 10), (1, 0, 10, 10), (50, 50, 10, 10)]})
        results = [
            det(0, (0, 0, 10, 10), 0.9),
            det(0, (1, 0, 10, 10), 0.8),
            det(0, (50, 50, 10, 10), 0.7),
        ]
        report = stratified_bbox_ap(gt, results)
        assert report.bins[0].ap == pytest.approx(1.0)
        assert report.bins[-1].ap == pytest.approx(1.0)
        assert report.overall_ap == pytest.approx(1.0)

    def test_overlapping_bins_rejected(self):
        gt = make_dataset({0: [(0, 0, 10, 10)]})
        with pytest.raises(ValueError):
            stratified_bbox_ap(gt, [], bins=((0.0, 0.5), (0.4, 1.0)))
        with pytest.raises(ValueError):
            stratified_bbox_ap(gt, [], bins=((0.0, 0.5), (0.6, 1.0)))

    def test_table_rendering(self):
        gt = make_dataset({0: [(0, 0, 10, 10)]})
        rep = stratified_bbox_ap(gt, [det(0, (0, 0, 10, 10), 0.9)])
        text = format_stratified_table({"run": rep})
        assert "max_IoU" in text
        assert "0.6 - 0.8" in text
        assert "mAP" in text


class TestLoaders:
    def test_empty_annotation_list(self, tmp_path):
        p = tmp_path / "gt.json"
        p.write_text(json.dumps({"images": [], "annotations": []}))
        ds = load_annotations(p)
        assert ds.instances == [] and ds.images == {}

    def test_hand_built_file_counts(self, tmp_path):
        doc = {
            "images": [
                {"id": 1, "width": 64, "height": 48, "file_name": "a.png"},
                {"id": 2, "width": 64, "height": 48, "file_name": "b.png"},
                {"id": 3, "width": 32, "height": 32, "file_name": "c.png"},
            ],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1,
                 "bbox": [1, 2, 10, 20], "area": 200.0, "iscrowd": 0},
                {"id": 2, "image_id": 1, "category_id": 1,
                 "bbox": [5, 5, 8, 8], "area": 64.0, "iscrowd": 0},
                {"id": 3, "image_id": 2, "category_id": 1,
                 "bbox": [0, 0, 4, 4], "area": 16.0, "iscrowd": 1},
            ],
        }
        p = tmp_path / "gt.json"
        p.write_text(json.dumps(doc))
        ds = load_annotations(p)
        assert len(ds.images) == 3
        assert len(ds.instances) == 3
        assert sum(1 for g in ds.instances if g.iscrowd) == 1
        assert len(ds.by_image[1]) == 2

    def test_schema_diagnostics_carry_field_path(self, tmp_path):
        p = tmp_path / "gt.json"
        p.write_text(json.dumps({
            "images": [{"id": 1, "width": 10, "height": 10}],
            "annotations": [{"id": 1, "image_id": 7, "bbox": [0, 0, 1, 1]}],
        }))
        with pytest.raises(ValueError, match=r"annotations\[0\].image_id"):
            load_annotations(p)
        p.write_text(json.dumps({
            "images": [{"id": 1, "width": 0, "height": 10}],
            "annotations": [],
        }))
        with pytest.raises(ValueError, match=r"images\[0\].width"):
            load_annotations(p)

    def test_results_loader_checks_images(self, tmp_path):
        p = tmp_path / "res.json"
        p.write_text(json.dumps([{"image_id": 9, "bbox": [0, 0, 1, 1], "score": 0.5}]))
        assert len(load_results(p)) == 1
        with pytest.raises(ValueError):
            load_results(p, images={1: {}})

    def test_ap_table_rendering(self):
        gt = make_dataset({0: [(0, 0, 10, 10)]})
        s = average_precision(gt, [det(0, (0, 0, 10, 10), 0.9)], "bbox")
        text = format_ap_table({"bbox": s})
        assert "AP50" in text and "100.0" in text
