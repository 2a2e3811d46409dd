"""COCO-style average precision for boxes, masks, and keypoints, plus the
max-overlap-stratified detection analysis for crowded scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BBox,
    BinaryMask,
    OksUndefined,
    Pose,
    bbox_iou,
    get_skeleton,
    oks,
)

__all__ = [
    "GtInstance",
    "Dataset",
    "ApSummary",
    "StratifiedBin",
    "StratifiedReport",
    "load_annotations",
    "load_results",
    "average_precision",
    "stratified_bbox_ap",
    "format_ap_table",
    "format_stratified_table",
    "DEFAULT_IOU_THRESHOLDS",
    "DEFAULT_MAX_IOU_BINS",
]

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DEFAULT_MAX_IOU_BINS = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))

TASKS = ("bbox", "segm", "keypoints")


@dataclass
class GtInstance:
    id: int
    image_id: int
    bbox: BBox
    area: float
    iscrowd: bool = False
    mask: BinaryMask | None = None
    keypoints: np.ndarray | None = None  # (K, 3) with x, y, v
    num_keypoints: int = 0


@dataclass
class Dataset:
    images: dict[int, dict]
    instances: list[GtInstance]
    skeleton_id: str = "coco17"
    by_image: dict[int, list[GtInstance]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_image:
            self.by_image = {img_id: [] for img_id in self.images}
            for inst in self.instances:
                self.by_image.setdefault(inst.image_id, []).append(inst)


def _err(where: str, problem: str):
    raise ValueError(f"{where}: {problem}")


def load_annotations(path) -> Dataset:
    """Read a COCO-format annotation file into a validated dataset.

    Raises ValueError with a field-level diagnostic on schema violations.
    """
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        _err(str(path), "top level must be a JSON object")
    for key in ("images", "annotations"):
        if not isinstance(raw.get(key), list):
            _err(str(path), f"missing or non-list {key!r}")

    images: dict[int, dict] = {}
    for i, img in enumerate(raw["images"]):
        where = f"images[{i}]"
        if not isinstance(img, dict):
            _err(where, "must be an object")
        img_id = img.get("id")
        if not isinstance(img_id, int):
            _err(where + ".id", f"must be an integer, got {img_id!r}")
        if img_id in images:
            _err(where + ".id", f"duplicate image id {img_id}")
        for dim in ("width", "height"):
            v = img.get(dim)
            if not isinstance(v, int) or v <= 0:
                _err(where + f".{dim}", f"must be a positive integer, got {v!r}")
        images[img_id] = {
            "width": img["width"],
            "height": img["height"],
            "file_name": img.get("file_name", ""),
        }

    skeleton_id = "coco17"
    categories = raw.get("categories") or []
    if categories:
        kp_names = categories[0].get("keypoints") or []
        if len(kp_names) == 22:
            skeleton_id = "merged22"
    skeleton = get_skeleton(skeleton_id)

    instances: list[GtInstance] = []
    seen_ids: set[int] = set()
    for i, ann in enumerate(raw["annotations"]):
        where = f"annotations[{i}]"
        if not isinstance(ann, dict):
            _err(where, "must be an object")
        ann_id = ann.get("id")
        if not isinstance(ann_id, int):
            _err(where + ".id", f"must be an integer, got {ann_id!r}")
        if ann_id in seen_ids:
            _err(where + ".id", f"duplicate annotation id {ann_id}")
        seen_ids.add(ann_id)
        image_id = ann.get("image_id")
        if image_id not in images:
            _err(where + ".image_id", f"references unknown image {image_id!r}")
        box = ann.get("bbox")
        if (
            not isinstance(box, (list, tuple))
            or len(box) != 4
            or not all(isinstance(v, (int, float)) for v in box)
        ):
            _err(where + ".bbox", f"must be [x, y, w, h], got {box!r}")
        if box[2] < 0 or box[3] < 0:
            _err(where + ".bbox", f"negative extents in {box!r}")
        area = ann.get("area", box[2] * box[3])
        if not isinstance(area, (int, float)) or area < 0:
            _err(where + ".area", f"must be a non-negative number, got {area!r}")
        iscrowd = ann.get("iscrowd", 0)
        if iscrowd not in (0, 1, True, False):
            _err(where + ".iscrowd", f"must be 0 or 1, got {iscrowd!r}")

        mask = None
        seg = ann.get("segmentation")
        if seg is not None:
            if not isinstance(seg, dict) or "counts" not in seg or "size" not in seg:
                _err(
                    where + ".segmentation",
                    "only RLE segmentations {size, counts} are supported",
                )
            try:
                mask = BinaryMask.from_rle(seg)
            except ValueError as exc:
                _err(where + ".segmentation", str(exc))
            img = images[image_id]
            if mask.shape != (img["height"], img["width"]):
                _err(
                    where + ".segmentation",
                    f"mask {mask.shape} does not match image "
                    f"({img['height']}, {img['width']})",
                )

        keypoints = None
        num_keypoints = 0
        kp = ann.get("keypoints")
        if kp is not None:
            if not isinstance(kp, (list, tuple)) or len(kp) != 3 * skeleton.keypoint_count:
                _err(
                    where + ".keypoints",
                    f"must hold {3 * skeleton.keypoint_count} numbers "
                    f"(x, y, v triplets), got length {len(kp) if isinstance(kp, (list, tuple)) else kp!r}",
                )
            keypoints = np.asarray(kp, dtype=np.float64).reshape(-1, 3)
            num_keypoints = int(np.count_nonzero(keypoints[:, 2] > 0))

        instances.append(
            GtInstance(
                id=ann_id,
                image_id=image_id,
                bbox=BBox(float(box[0]), float(box[1]), float(box[2]), float(box[3])),
                area=float(area),
                iscrowd=bool(iscrowd),
                mask=mask,
                keypoints=keypoints,
                num_keypoints=num_keypoints,
            )
        )
    return Dataset(images=images, instances=instances, skeleton_id=skeleton_id)


def load_results(path, images: dict[int, dict] | None = None) -> list[dict]:
    """Read a COCO-results-style file (a JSON list of detection entries)."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        _err(str(path), "results file must be a JSON list")
    for i, entry in enumerate(raw):
        where = f"results[{i}]"
        if not isinstance(entry, dict):
            _err(where, "must be an object")
        if "image_id" not in entry:
            _err(where, "missing image_id")
        if images is not None and entry["image_id"] not in images:
            _err(where + ".image_id", f"references unknown image {entry['image_id']!r}")
        if "score" not in entry or not isinstance(entry["score"], (int, float)):
            _err(where + ".score", "missing or non-numeric")
    return raw


def _result_score(entry: dict, task: str) -> float:
    if task == "segm" and "mask_score" in entry:
        return float(entry["mask_score"])
    if task == "keypoints" and "pose_score" in entry:
        return float(entry["pose_score"])
    return float(entry["score"])


def _iou_bbox(entry: dict, gt: GtInstance) -> float:
    box = entry.get("bbox")
    if box is None:
        return 0.0
    det = BBox(float(box[0]), float(box[1]), float(box[2]), float(box[3]))
    if not gt.iscrowd:
        return bbox_iou(det, gt.bbox)
    ix = max(0.0, min(det.x2, gt.bbox.x2) - max(det.x, gt.bbox.x))
    iy = max(0.0, min(det.y2, gt.bbox.y2) - max(det.y, gt.bbox.y))
    inter = ix * iy
    return inter / det.area if det.area > 0 else 0.0


def _iou_segm(entry: dict, gt: GtInstance, cache: dict) -> float:
    if gt.mask is None:
        return 0.0
    seg = entry.get("segmentation")
    if seg is None:
        return 0.0
    key = id(entry)
    if key not in cache:
        cache[key] = BinaryMask.from_rle(seg)
    det = cache[key]
    if det.shape != gt.mask.shape:
        return 0.0
    inter = int(np.count_nonzero(det.bits & gt.mask.bits))
    if not gt.iscrowd:
        union = int(np.count_nonzero(det.bits | gt.mask.bits))
    else:
        union = det.area
    return inter / union if union > 0 else 0.0


def _oks_keypoints(entry: dict, gt: GtInstance, skeleton) -> float:
    kp = entry.get("keypoints")
    if kp is None or gt.keypoints is None:
        return 0.0
    det = np.asarray(kp, dtype=np.float64).reshape(-1, 3)
    if det.shape[0] != skeleton.keypoint_count:
        raise ValueError(
            f"result keypoints have {det.shape[0]} points, skeleton "
            f"{skeleton.name!r} declares {skeleton.keypoint_count}"
        )
    vis = gt.keypoints[:, 2]
    if np.any(vis > 0):
        gt_pose = Pose(skeleton.name, np.column_stack([gt.keypoints[:, :2], np.zeros(len(vis))]))
        det_pose = Pose(
            skeleton.name,
            np.column_stack([det[:, :2], np.clip(det[:, 2], 0, 1)]),
        )
        try:
            return oks(gt_pose, det_pose, area=gt.area, skeleton=skeleton, visibility=vis)
        except OksUndefined:
            return 0.0
    # keypoint-less ground truth: score detections by proximity to the box
    # neighbourhood so they can be ignored rather than counted as errors
    x0, x1 = gt.bbox.x - gt.bbox.w, gt.bbox.x + 2 * gt.bbox.w
    y0, y1 = gt.bbox.y - gt.bbox.h, gt.bbox.y + 2 * gt.bbox.h
    dx = np.maximum(0.0, np.maximum(x0 - det[:, 0], det[:, 0] - x1))
    dy = np.maximum(0.0, np.maximum(y0 - det[:, 1], det[:, 1] - y1))
    sigmas = np.asarray(skeleton.oks_sigmas)
    e = (dx**2 + dy**2) / ((2 * sigmas) ** 2) / (gt.area + np.spacing(1)) / 2.0
    return float(np.mean(np.exp(-e)))


@dataclass
class ApSummary:
    task: str
    ap: float | None
    ap50: float | None
    ap75: float | None
    ar: float | None
    per_threshold: dict[float, float | None]
    recall_per_threshold: dict[float, float | None]
    pr_curves: dict[float, list[float]]
    gt_count: int
    det_count: int

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ar": self.ar,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "recall_per_threshold": {
                f"{t:.2f}": v for t, v in self.recall_per_threshold.items()
            },
            "gt_count": self.gt_count,
            "det_count": self.det_count,
        }


def _match_image(dts, gts, iou_fn, thresholds):
    """Greedy per-threshold matching; returns (dt_matched, dt_ignored) arrays
    of shape (T, n_dt) plus per-threshold matched-gt counts."""
    n_dt, n_gt = len(dts), len(gts)
    T = len(thresholds)
    dt_matched = np.zeros((T, n_dt), dtype=bool)
    dt_ignored = np.zeros((T, n_dt), dtype=bool)
    gt_matched_counts = np.zeros(T, dtype=int)
    if n_gt == 0:
        return dt_matched, dt_ignored, gt_matched_counts

    # non-ignored ground truth first, stable
    gt_order = sorted(range(n_gt), key=lambda g: gts[g][1])
    ious = np.zeros((n_dt, n_gt))
    for d in range(n_dt):
        for g in range(n_gt):
            ious[d, g] = iou_fn(dts[d], gts[g][0])

    for ti, t in enumerate(thresholds):
        gt_used = [False] * n_gt
        for d in range(n_dt):
            best = -1
            best_iou = min(t, 1.0 - 1e-10)
            for g in gt_order:
                gt, gt_ig = gts[g]
                if gt_used[g] and not gt.iscrowd:
                    continue
                if best > -1 and not gts[best][1] and gt_ig:
                    break  # settled on a real match; ignores cannot improve it
                if ious[d, g] < best_iou:
                    continue
                best_iou = ious[d, g]
                best = g
            if best == -1:
                continue
            gt, gt_ig = gts[best]
            gt_used[best] = True
            dt_matched[ti, d] = True
            dt_ignored[ti, d] = gt_ig
            if not gt_ig:
                gt_matched_counts[ti] += 1
    return dt_matched, dt_ignored, gt_matched_counts


def average_precision(
    gt: Dataset,
    results: list[dict],
    task: str,
    max_dets: int = 100,
    iou_thresholds=None,
    gt_ignore=None,
) -> ApSummary:
    """COCO-protocol AP: greedy score-ordered matching at each threshold,
    101-point interpolated precision, crowd ground truth as ignore regions.

    ``gt_ignore`` optionally marks extra ground-truth instances as ignore
    (used by the stratified analysis); detections matched to ignored ground
    truth are neither true nor false positives.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    skeleton = get_skeleton(gt.skeleton_id)
    thresholds = tuple(iou_thresholds) if iou_thresholds is not None else DEFAULT_IOU_THRESHOLDS
    for entry in results:
        if entry["image_id"] not in gt.images:
            raise ValueError(f"result references unknown image {entry['image_id']!r}")

    def ignore_flag(g: GtInstance) -> bool:
        flag = g.iscrowd
        if task == "keypoints":
            flag = flag or g.num_keypoints == 0 or g.keypoints is None
        if task == "segm":
            flag = flag or g.mask is None
        if gt_ignore is not None:
            flag = flag or bool(gt_ignore(g))
        return flag

    by_image_dt: dict[int, list[dict]] = {img_id: [] for img_id in gt.images}
    for entry in results:
        by_image_dt[entry["image_id"]].append(entry)

    segm_cache: dict = {}
    if task == "bbox":
        iou_fn = _iou_bbox
    elif task == "segm":
        iou_fn = lambda d, g: _iou_segm(d, g, segm_cache)
    else:
        iou_fn = lambda d, g: _oks_keypoints(d, g, skeleton)

    T = len(thresholds)
    all_scores: list[list[float]] = []
    all_matched = [[] for _ in range(T)]
    all_ignored = [[] for _ in range(T)]
    npig = 0

    for img_id in sorted(gt.images):
        gts = [(g, ignore_flag(g)) for g in gt.by_image.get(img_id, [])]
        npig += sum(1 for _, ig in gts if not ig)
        dts = sorted(
            by_image_dt[img_id], key=lambda e: -_result_score(e, task)
        )[:max_dets]
        dt_matched, dt_ignored, _ = _match_image(dts, gts, iou_fn, thresholds)
        all_scores.append([_result_score(d, task) for d in dts])
        for ti in range(T):
            all_matched[ti].append(dt_matched[ti])
            all_ignored[ti].append(dt_ignored[ti])

    scores = np.concatenate([np.asarray(s) for s in all_scores]) if all_scores else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    det_count = int(order.size)

    per_threshold: dict[float, float | None] = {}
    recall_per_threshold: dict[float, float | None] = {}
    pr_curves: dict[float, list[float]] = {}
    for ti, t in enumerate(thresholds):
        matched = (
            np.concatenate(all_matched[ti]) if all_matched[ti] else np.zeros(0, dtype=bool)
        )[order]
        ignored = (
            np.concatenate(all_ignored[ti]) if all_ignored[ti] else np.zeros(0, dtype=bool)
        )[order]
        tps = np.cumsum(matched & ~ignored)
        fps = np.cumsum(~matched & ~ignored)
        if npig == 0:
            per_threshold[t] = None
            recall_per_threshold[t] = None
            pr_curves[t] = [0.0] * len(RECALL_POINTS)
            continue
        recall = tps / npig
        precision = tps / np.maximum(tps + fps, 1e-12)
        # monotone envelope from the right, then sample at 101 recall points
        prec = precision.copy()
        for i in range(len(prec) - 1, 0, -1):
            prec[i - 1] = max(prec[i - 1], prec[i])
        q = np.zeros(len(RECALL_POINTS))
        inds = np.searchsorted(recall, RECALL_POINTS, side="left")
        for ri, pi in enumerate(inds):
            if pi < len(prec):
                q[ri] = prec[pi]
        per_threshold[t] = float(q.mean())
        recall_per_threshold[t] = float(recall[-1]) if recall.size else 0.0
        pr_curves[t] = [float(v) for v in q]

    valid = [v for v in per_threshold.values() if v is not None]
    valid_r = [v for v in recall_per_threshold.values() if v is not None]
    return ApSummary(
        task=task,
        ap=float(np.mean(valid)) if valid else None,
        ap50=per_threshold.get(0.5),
        ap75=per_threshold.get(0.75),
        ar=float(np.mean(valid_r)) if valid_r else None,
        per_threshold=per_threshold,
        recall_per_threshold=recall_per_threshold,
        pr_curves=pr_curves,
        gt_count=npig,
        det_count=det_count,
    )


@dataclass
class StratifiedBin:
    lo: float
    hi: float
    gt_count: int
    ap: float | None
    ar: float | None

    def to_json(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "gt_count": self.gt_count,
            "ap": self.ap,
            "ar": self.ar,
        }


@dataclass
class StratifiedReport:
    bins: list[StratifiedBin]
    overall_ap: float | None
    overall_ar: float | None
    task: str = "bbox"

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "bins": [b.to_json() for b in self.bins],
            "overall_ap": self.overall_ap,
            "overall_ar": self.overall_ar,
        }


def max_iou_per_instance(gt: Dataset) -> dict[int, float]:
    """Strongest box overlap of each ground-truth instance with any other
    instance in its image (0 for loners)."""
    out: dict[int, float] = {}
    for img_id, instances in gt.by_image.items():
        boxes = [(g.id, g.bbox) for g in instances if not g.iscrowd]
        for gid, box in boxes:
            best = 0.0
            for oid, other in boxes:
                if oid != gid:
                    best = max(best, bbox_iou(box, other))
            out[gid] = best
    return out


def stratified_bbox_ap(
    gt: Dataset,
    results: list[dict],
    bins=DEFAULT_MAX_IOU_BINS,
    max_dets: int = 100,
) -> StratifiedReport:
    """Detection AP split by how much each ground-truth instance overlaps its
    neighbours. Out-of-bin instances act as ignore regions, so detections of
    them are dropped from the bin's tally instead of counting as false
    positives; the absolute numbers therefore run lower than plain AP.
    """
    bins = [(float(lo), float(hi)) for lo, hi in bins]
    for (lo, hi) in bins:
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"bad bin ({lo}, {hi})")
    ordered = sorted(bins)
    if ordered[0][0] != 0.0 or ordered[-1][1] != 1.0:
        raise ValueError(f"bins must span [0, 1], got {bins}")
    for (_, prev_hi), (lo, _) in zip(ordered, ordered[1:]):
        if lo != prev_hi:
            raise ValueError(f"bins must partition [0, 1] without gaps/overlap: {bins}")

    overlap = max_iou_per_instance(gt)

    def bin_of(value: float) -> int:
        for i, (lo, hi) in enumerate(ordered):
            if lo <= value < hi or (hi == 1.0 and value == 1.0):
                return i
        raise AssertionError(f"value {value} fell through bins")

    assignment = {gid: bin_of(v) for gid, v in overlap.items()}

    out_bins: list[StratifiedBin] = []
    for i, (lo, hi) in enumerate(ordered):
        summary = average_precision(
            gt,
            results,
            "bbox",
            max_dets=max_dets,
            gt_ignore=lambda g, i=i: assignment.get(g.id) != i,
        )
        gt_count = sum(
            1 for g in gt.instances if not g.iscrowd and assignment.get(g.id) == i
        )
        out_bins.append(
            StratifiedBin(lo=lo, hi=hi, gt_count=gt_count, ap=summary.ap, ar=summary.ar)
        )
    overall = average_precision(gt, results, "bbox", max_dets=max_dets)
    return StratifiedReport(
        bins=out_bins, overall_ap=overall.ap, overall_ar=overall.ar
    )


def _fmt(v: float | None) -> str:
    return "  ---" if v is None else f"{100 * v:5.1f}"


def format_ap_table(summaries: dict[str, ApSummary]) -> str:
    lines = [f"{'task':<10} {'AP':>6} {'AP50':>6} {'AP75':>6} {'AR':>6} {'nGT':>6}"]
    for name, s in summaries.items():
        lines.append(
            f"{name:<10} {_fmt(s.ap):>6} {_fmt(s.ap50):>6} {_fmt(s.ap75):>6} "
            f"{_fmt(s.ar):>6} {s.gt_count:>6}"
        )
    return "\n".join(lines)


def format_stratified_table(reports: dict[str, StratifiedReport]) -> str:
    """Render rows of per-bin AP with a trailing overall-AP column."""
    some = next(iter(reports.values()))
    header = "bbox AP @ max_IoU".ljust(24) + " | "
    header += " | ".join(f"{b.lo:.1f} - {b.hi:.1f}" for b in some.bins)
    header += " | mAP"
    lines = [header, "-" * len(header)]
    for name, rep in reports.items():
        row = name.ljust(24) + " | "
        row += " | ".join(f"{_fmt(b.ap):>9}" for b in rep.bins)
        row += f" | {_fmt(rep.overall_ap)}"
        lines.append(row)
    return "\n".join(lines)
