"""Greedy bounding-box NMS and pose NMS for deduplicating detections."""

from __future__ import annotations

import math
from typing import Sequence

from .geometry import BBox, Pose, SkeletonConfig, bbox_iou

__all__ = ["bbox_nms", "pose_nms", "prediction_oks"]


def bbox_nms(
    boxes: Sequence[BBox],
    iou_threshold: float,
    n_anchors: int = 0,
) -> list[int]:
    """Greedy suppression by box score: keep, drop overlaps above threshold.

    Candidates are visited by descending ``score`` (ties by lower index) and
    kept unless their IoU with any already-kept box strictly exceeds the
    threshold. The first ``n_anchors`` boxes are treated as already accepted:
    they are kept unconditionally and only suppress the rest, which lets an
    iterative caller protect instances from earlier rounds.

    Returns kept indices in ascending order.
    """
    n = len(boxes)
    kept = list(range(min(n_anchors, n)))
    order = sorted(range(n_anchors, n), key=lambda i: (-boxes[i].score, i))
    for i in order:
        if all(bbox_iou(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return sorted(kept)


def prediction_oks(
    ref: Pose,
    other: Pose,
    area: float,
    skeleton: SkeletonConfig,
    t_c: float,
) -> float:
    """Keypoint similarity between two predictions.

    The reference pose's keypoints at or above ``t_c`` play the annotated
    set; with none qualifying, or a non-positive area, there is no basis for
    suppression and the similarity is 0.
    """
    if area <= 0:
        return 0.0
    annotated = [i for i in range(len(ref)) if ref.pts[i, 2] >= t_c]
    if not annotated:
        return 0.0
    total = 0.0
    for i in annotated:
        dx = other.pts[i, 0] - ref.pts[i, 0]
        dy = other.pts[i, 1] - ref.pts[i, 1]
        k = 2.0 * skeleton.oks_sigmas[i]
        total += math.exp(-(dx * dx + dy * dy) / (2.0 * area * k * k))
    return total / len(annotated)


def pose_nms(
    poses: Sequence[Pose | None],
    areas: Sequence[float],
    skeleton: SkeletonConfig,
    oks_threshold: float,
    t_c: float = 0.3,
    n_anchors: int = 0,
) -> list[int]:
    """Greedy suppression by pose score with keypoint similarity as overlap.

    The score of a pose is the mean confidence of its keypoints at or above
    ``t_c``. A candidate is dropped when its similarity to any kept pose
    strictly exceeds the threshold; the scale term is the geometric mean of
    the two instances' areas. Entries without a pose pass through untouched
    and suppress nothing. The first ``n_anchors`` entries are kept
    unconditionally, as in :func:`bbox_nms`.

    Returns kept indices in ascending order.
    """
    n = len(poses)
    if len(areas) != n:
        raise ValueError(f"{n} poses but {len(areas)} areas")
    kept = list(range(min(n_anchors, n)))
    scores = [p.score(t_c) if p is not None else 0.0 for p in poses]
    order = sorted(range(n_anchors, n), key=lambda i: (-scores[i], i))
    for i in order:
        if poses[i] is None:
            kept.append(i)
            continue
        suppressed = False
        for k in kept:
            if poses[k] is None:
                continue
            scale = math.sqrt(max(areas[i], 0.0) * max(areas[k], 0.0))
            if prediction_oks(poses[k], poses[i], scale, skeleton, t_c) > oks_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return sorted(kept)
