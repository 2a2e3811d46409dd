"""poseloop: iterative detection, segmentation, and pose estimation for
multi-person scenes.

The loop alternates three mutually conditioned stages: a detector running on
an image with already-found people blacked out, a pose estimator running on
mask-conditioned crops, and a promptable segmenter driven by selected
keypoints, with consistency gating and dual non-maximum suppression holding
the pieces together. Neural models live behind a small wire protocol; a
deterministic synthetic backend stands in for them at test scale.
"""

from .engine import Instance, IterationStats, LoopConfig, LoopResult, refine_once, run_loop
from .geometry import (
    BBox,
    BinaryMask,
    Keypoint,
    OksUndefined,
    Pose,
    SkeletonConfig,
    bbox_iou,
    get_skeleton,
    mask_iou,
    mask_union,
    oks,
    register_skeleton,
)
from .prompting import PromptPolicy, PromptSet, loop_policy, refinement_policy

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BinaryMask",
    "Keypoint",
    "Pose",
    "SkeletonConfig",
    "OksUndefined",
    "bbox_iou",
    "mask_iou",
    "mask_union",
    "oks",
    "get_skeleton",
    "register_skeleton",
    "PromptPolicy",
    "PromptSet",
    "loop_policy",
    "refinement_policy",
    "Instance",
    "IterationStats",
    "LoopConfig",
    "LoopResult",
    "run_loop",
    "refine_once",
    "__version__",
]
