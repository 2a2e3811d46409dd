"""Keypoint-prompt selection and bounding-box prompt policy for the segmenter."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .geometry import BBox, Pose, SkeletonConfig

__all__ = [
    "PromptPolicy",
    "PromptSet",
    "select_positive_prompts",
    "select_negative_prompts",
    "bbox_prompt",
    "build_prompt_set",
    "loop_policy",
    "refinement_policy",
]

SELECTION_MODES = ("confidence_only", "distance_only", "confidence_plus_distance")
BBOX_MODES = ("never", "always", "by_max_iou")


@dataclass(frozen=True)
class PromptPolicy:
    """Every knob of prompt construction for one segmenter call.

    ``n_max_boxed`` caps positives when a box prompt accompanies them; when
    None the plain ``n_max`` applies either way. ``bbox_iou_threshold`` is
    only read in the "by_max_iou" box mode: instances whose strongest overlap
    with other detections stays below it are considered isolated and get the
    box.
    """

    t_c: float = 0.5
    n_max: int = 6
    n_max_boxed: int | None = None
    n_neg: int = 0
    selection_mode: str = "confidence_plus_distance"
    bbox_mode: str = "never"
    bbox_iou_threshold: float = 0.5
    extend_bbox: bool = False
    facial_cap: bool = True

    def __post_init__(self):
        if not 0.0 <= self.t_c <= 1.0:
            raise ValueError(f"t_c {self.t_c} outside [0, 1]")
        if self.n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {self.n_max}")
        if self.n_neg < 0:
            raise ValueError(f"n_neg must be >= 0, got {self.n_neg}")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection_mode {self.selection_mode!r}")
        if self.bbox_mode not in BBOX_MODES:
            raise ValueError(f"unknown bbox_mode {self.bbox_mode!r}")

    def positive_budget(self, with_bbox: bool) -> int:
        if with_bbox and self.n_max_boxed is not None:
            return self.n_max_boxed
        return self.n_max

    def to_json(self) -> dict:
        return {
            "t_c": self.t_c,
            "n_max": self.n_max,
            "n_max_boxed": self.n_max_boxed,
            "n_neg": self.n_neg,
            "selection_mode": self.selection_mode,
            "bbox_mode": self.bbox_mode,
            "bbox_iou_threshold": self.bbox_iou_threshold,
            "extend_bbox": self.extend_bbox,
            "facial_cap": self.facial_cap,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptPolicy":
        return cls(**obj)


def loop_policy(**overrides) -> PromptPolicy:
    """Default policy for the re-detection loop: 6 spread keypoints, no box."""
    policy = PromptPolicy(
        t_c=0.3,
        n_max=6,
        n_neg=0,
        selection_mode="confidence_plus_distance",
        bbox_mode="never",
        facial_cap=True,
    )
    return replace(policy, **overrides) if overrides else policy


def refinement_policy(**overrides) -> PromptPolicy:
    """Default policy for post-loop mask/pose refinement.

    Boxes are trusted only for isolated instances (overlap below 0.5) and are
    extended to cover every positive prompt; 6 positives without a box, 4
    with one.
    """
    policy = PromptPolicy(
        t_c=0.5,
        n_max=6,
        n_max_boxed=4,
        n_neg=0,
        selection_mode="confidence_plus_distance",
        bbox_mode="by_max_iou",
        bbox_iou_threshold=0.5,
        extend_bbox=True,
        facial_cap=True,
    )
    return replace(policy, **overrides) if overrides else policy


@dataclass(frozen=True)
class PromptSet:
    """Points and optional box handed to the segmenter for one instance."""

    positives: tuple[tuple[float, float], ...] = ()
    negatives: tuple[tuple[float, float], ...] = ()
    bbox: BBox | None = None

    def to_json(self) -> dict:
        return {
            "positives": [list(p) for p in self.positives],
            "negatives": [list(p) for p in self.negatives],
            "bbox": [self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h]
            if self.bbox is not None
            else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptSet":
        box = obj.get("bbox")
        return cls(
            positives=tuple((float(x), float(y)) for x, y in obj.get("positives", [])),
            negatives=tuple((float(x), float(y)) for x, y in obj.get("negatives", [])),
            bbox=BBox(*box) if box is not None else None,
        )


def _sq_dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    return dx * dx + dy * dy


def _drop_other_facial(candidates, picked_index, facial):
    if picked_index in facial:
        return [c for c in candidates if c[0] not in facial]
    return candidates


def select_positive_prompts(
    pose: Pose,
    skeleton: SkeletonConfig,
    policy: PromptPolicy,
    bbox: BBox | None = None,
    n_max: int | None = None,
) -> list[tuple[float, float]]:
    """Pick up to n_max keypoints to mark the instance for the segmenter.

    Only keypoints at or above the confidence threshold are considered. In
    the combined mode the most confident keypoint is taken first and each
    subsequent pick maximizes the minimum distance to the already-selected
    set; ties break by higher confidence, then lower keypoint index. At most
    one facial keypoint survives when the facial cap is on. The distance-only
    mode ranks by distance from the box center (``bbox``, or the candidates'
    tight box when absent).

    Returns an ordered list; an empty list means "skip the segmenter".
    """
    if n_max is None:
        n_max = policy.n_max
    facial = skeleton.facial_indices if policy.facial_cap else frozenset()
    candidates = [
        (i, float(pose.pts[i, 0]), float(pose.pts[i, 1]), float(pose.pts[i, 2]))
        for i in range(len(pose))
        if pose.pts[i, 2] >= policy.t_c
    ]
    if not candidates:
        return []

    mode = policy.selection_mode
    selected: list[tuple[int, float, float, float]] = []

    if mode == "confidence_only":
        ranked = sorted(candidates, key=lambda c: (-c[3], c[0]))
        for cand in ranked:
            if len(selected) >= n_max:
                break
            if cand[0] in facial and any(s[0] in facial for s in selected):
                continue
            selected.append(cand)
    elif mode == "distance_only":
        if bbox is not None:
            center = bbox.center
        else:
            xs = [c[1] for c in candidates]
            ys = [c[2] for c in candidates]
            center = ((min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0)
        ranked = sorted(
            candidates, key=lambda c: (-_sq_dist((c[1], c[2]), center), -c[3], c[0])
        )
        for cand in ranked:
            if len(selected) >= n_max:
                break
            if cand[0] in facial and any(s[0] in facial for s in selected):
                continue
            selected.append(cand)
    else:  # confidence_plus_distance
        remaining = list(candidates)
        first = min(remaining, key=lambda c: (-c[3], c[0]))
        selected.append(first)
        remaining = [c for c in remaining if c[0] != first[0]]
        remaining = _drop_other_facial(remaining, first[0], facial)
        while len(selected) < n_max and remaining:
            best = None
            best_key = None
            for cand in remaining:
                min_d = min(_sq_dist((cand[1], cand[2]), (s[1], s[2])) for s in selected)
                key = (min_d, cand[3], -cand[0])
                if best_key is None or key > best_key:
                    best = cand
                    best_key = key
            selected.append(best)
            remaining = [c for c in remaining if c[0] != best[0]]
            remaining = _drop_other_facial(remaining, best[0], facial)

    return [(s[1], s[2]) for s in selected]


def select_negative_prompts(
    target: Pose,
    others: Sequence[Pose],
    policy: PromptPolicy,
    skeleton: SkeletonConfig,
    positives: Sequence[tuple[float, float]] | None = None,
) -> list[tuple[float, float]]:
    """Pick up to n_neg confident keypoints of other instances, nearest to
    the target's positive prompts."""
    if policy.n_neg <= 0 or not others:
        return []
    if positives is None:
        positives = select_positive_prompts(target, skeleton, policy)
    if not positives:
        return []
    scored = []
    for oi, other in enumerate(others):
        for ki in range(len(other)):
            x, y, c = other.pts[ki]
            if c < policy.t_c:
                continue
            d = min(_sq_dist((x, y), p) for p in positives)
            scored.append((d, -c, oi, ki, float(x), float(y)))
    scored.sort()
    return [(s[4], s[5]) for s in scored[: policy.n_neg]]


def bbox_prompt(
    bbox: BBox,
    positives: Sequence[tuple[float, float]],
    max_iou_with_neighbors: float,
    policy: PromptPolicy,
) -> BBox | None:
    """Decide whether (and with which box) to prompt the segmenter.

    "never" trusts points alone so the segmenter can explore beyond bad
    detections; "always" sends the box; "by_max_iou" sends it only for
    isolated instances, whose strongest overlap with other detections stays
    below the policy threshold. With ``extend_bbox`` the box grows to cover
    every positive prompt.
    """
    if policy.bbox_mode == "never":
        return None
    if policy.bbox_mode == "by_max_iou" and max_iou_with_neighbors >= policy.bbox_iou_threshold:
        return None
    if policy.extend_bbox and positives:
        return bbox.expanded_to_contain(positives)
    return bbox


def build_prompt_set(
    pose: Pose,
    bbox: BBox,
    others: Sequence[Pose],
    skeleton: SkeletonConfig,
    policy: PromptPolicy,
    max_iou_with_neighbors: float = 0.0,
) -> PromptSet:
    """Assemble the full prompt set for one instance under the policy."""
    if policy.bbox_mode == "never":
        with_bbox = False
    elif policy.bbox_mode == "always":
        with_bbox = True
    else:
        with_bbox = max_iou_with_neighbors < policy.bbox_iou_threshold
    budget = policy.positive_budget(with_bbox)
    positives = select_positive_prompts(pose, skeleton, policy, bbox=bbox, n_max=budget)
    if not positives:
        return PromptSet()
    negatives = select_negative_prompts(pose, others, policy, skeleton, positives=positives)
    box = bbox_prompt(bbox, positives, max_iou_with_neighbors, policy)
    return PromptSet(
        positives=tuple(positives), negatives=tuple(negatives), bbox=box
    )
