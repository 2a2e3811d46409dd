"""Pose-mask consistency score and the accept/discard gate for refined masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .geometry import BinaryMask

__all__ = ["ConsistencyReport", "GateResult", "pose_mask_consistency", "mask_gate"]

Point = tuple[float, float]


@dataclass(frozen=True)
class ConsistencyReport:
    """How well a mask agrees with the instance's own and foreign keypoints.

    The score is the fraction of the instance's keypoints inside the mask
    plus the fraction of other instances' keypoints outside it, so it lives
    in [0, 2]. With no negative keypoints the second term is vacuously 1.
    """

    pmc: float
    positives_inside: int
    positives_total: int
    negatives_outside: int
    negatives_total: int

    def to_json(self) -> dict:
        return {
            "pmc": self.pmc,
            "positives_inside": self.positives_inside,
            "positives_total": self.positives_total,
            "negatives_outside": self.negatives_outside,
            "negatives_total": self.negatives_total,
        }


def _point_inside(mask: BinaryMask, point: Point) -> bool:
    # nearest pixel by half-up rounding; out-of-image points count as outside
    px = math.floor(point[0] + 0.5)
    py = math.floor(point[1] + 0.5)
    if not (0 <= px < mask.width and 0 <= py < mask.height):
        return False
    return bool(mask.bits[py, px])


def pose_mask_consistency(
    mask: BinaryMask,
    positives: Sequence[Point],
    negatives: Sequence[Point] = (),
) -> ConsistencyReport:
    """Score a mask against the instance's keypoints (positives) and other
    instances' keypoints (negatives).

    A point is inside the mask iff its rounded pixel is a set bit. Positives
    must be non-empty; the score is undefined without them.
    """
    if not positives:
        raise ValueError("pose-mask consistency undefined without positive keypoints")
    pin = sum(1 for p in positives if _point_inside(mask, p))
    nout = sum(1 for p in negatives if not _point_inside(mask, p))
    pos_term = pin / len(positives)
    neg_term = nout / len(negatives) if negatives else 1.0
    return ConsistencyReport(
        pmc=pos_term + neg_term,
        positives_inside=pin,
        positives_total=len(positives),
        negatives_outside=nout,
        negatives_total=len(negatives),
    )


@dataclass(frozen=True)
class GateResult:
    """Outcome of comparing a refined mask against the one it would replace."""

    mask: BinaryMask
    refined_kept: bool
    original_report: ConsistencyReport
    refined_report: ConsistencyReport

    def to_json(self) -> dict:
        return {
            "refined_kept": self.refined_kept,
            "original": self.original_report.to_json(),
            "refined": self.refined_report.to_json(),
        }


def mask_gate(
    original: BinaryMask,
    refined: BinaryMask,
    positives: Sequence[Point],
    negatives: Sequence[Point] = (),
) -> GateResult:
    """Keep the refined mask unless it scores strictly worse than the original.

    Ties favor the refinement; only a strictly lower consistency discards it.
    """
    if original.shape != refined.shape:
        raise ValueError(
            f"mask dimensions differ: {original.shape} vs {refined.shape}"
        )
    original_report = pose_mask_consistency(original, positives, negatives)
    refined_report = pose_mask_consistency(refined, positives, negatives)
    keep_refined = refined_report.pmc >= original_report.pmc
    return GateResult(
        mask=refined if keep_refined else original,
        refined_kept=keep_refined,
        original_report=original_report,
        refined_report=refined_report,
    )
