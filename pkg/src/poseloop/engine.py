"""The iterative state machine: detect on the masked image, pose each new
instance on its mask-conditioned crop, prompt the segmenter, gate the refined
mask, mask out, repeat until nothing new turns up."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backends import BackendOpError, BackendRefused, BackendSet, ProtocolError
from .consistency import mask_gate
from .geometry import (
    BBox,
    BinaryMask,
    Pose,
    bbox_iou,
    get_skeleton,
    tight_bbox,
)
from .imaging import crop_expand, mask_out, require_rgb, semi_transparent_blend
from .prompting import PromptPolicy, build_prompt_set, loop_policy, refinement_policy
from .suppression import bbox_nms, pose_nms

__all__ = ["Instance", "LoopConfig", "IterationStats", "LoopResult", "run_loop", "refine_once"]


@dataclass
class Instance:
    """One person hypothesis threaded through the loop.

    ``mask`` always matches the scene dimensions; an all-zero mask means the
    detector supplied none. ``events`` is the ordered provenance log.
    """

    id: int
    iteration_born: int
    bbox: BBox
    mask: BinaryMask
    pose: Pose | None = None
    det_score: float = 0.0
    pose_score: float = 0.0
    mask_score: float = 0.0
    events: list[dict] = field(default_factory=list)

    def log(self, event: str, iteration: int, **detail) -> None:
        entry = {"event": event, "iteration": iteration}
        if detail:
            entry.update(detail)
        self.events.append(entry)

    def area_for_oks(self) -> float:
        return float(self.mask.area) if self.mask.area > 0 else self.bbox.area

    def confident_keypoints(self, t_c: float) -> list[tuple[float, float]]:
        if self.pose is None:
            return []
        return [
            (float(x), float(y))
            for x, y, c in self.pose.pts
            if c >= t_c
        ]

    def to_result_json(self, image_id) -> dict:
        out = {
            "image_id": image_id,
            "category_id": 1,
            "bbox": [self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h],
            "score": self.det_score,
            "segmentation": self.mask.to_rle(compressed=True),
            "mask_score": self.mask_score,
            "pose_score": self.pose_score,
        }
        if self.pose is not None:
            out["keypoints"] = [float(v) for row in self.pose.pts for v in row]
        return out

    def provenance_json(self) -> dict:
        return {
            "id": self.id,
            "iteration_born": self.iteration_born,
            "bbox": [self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h],
            "det_score": self.det_score,
            "pose_score": self.pose_score,
            "mask_score": self.mask_score,
            "mask_area": self.mask.area,
            "events": self.events,
        }


@dataclass(frozen=True)
class LoopConfig:
    """Every tunable of the loop. Defaults reproduce the evaluated setup:
    two iterations, 0.8 background dimming, NMS at 0.3 box IoU and 0.9 pose
    similarity, spread-keypoint prompting without boxes, consistency gate on."""

    max_iterations: int = 2
    alpha: float = 0.8
    det_score_min: float = 0.3
    bbox_nms_iou: float = 0.3
    pose_nms_oks: float = 0.9
    pmc_gate: bool = True
    rerun_pose_after_refine: bool = False
    refine_after_loop: bool = False
    skeleton_id: str = "coco17"
    crop_padding: float = 0.25
    crop_aspect: float = 0.75
    loop_prompts: PromptPolicy = loop_policy()
    refine_prompts: PromptPolicy = refinement_policy()

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "alpha": self.alpha,
            "det_score_min": self.det_score_min,
            "bbox_nms_iou": self.bbox_nms_iou,
            "pose_nms_oks": self.pose_nms_oks,
            "pmc_gate": self.pmc_gate,
            "rerun_pose_after_refine": self.rerun_pose_after_refine,
            "refine_after_loop": self.refine_after_loop,
            "skeleton_id": self.skeleton_id,
            "crop_padding": self.crop_padding,
            "crop_aspect": self.crop_aspect,
            "loop_prompts": self.loop_prompts.to_json(),
            "refine_prompts": self.refine_prompts.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LoopConfig":
        obj = dict(obj)
        if "loop_prompts" in obj:
            obj["loop_prompts"] = PromptPolicy.from_json(obj["loop_prompts"])
        if "refine_prompts" in obj:
            obj["refine_prompts"] = PromptPolicy.from_json(obj["refine_prompts"])
        return cls(**obj)


@dataclass
class IterationStats:
    iteration: int
    detections: int = 0
    new_candidates: int = 0
    suppressed_bbox: int = 0
    suppressed_pose: int = 0
    accepted: int = 0
    gate_checked: int = 0
    gate_discarded: int = 0
    masked_fraction: float = 0.0

    @property
    def gate_discard_rate(self) -> float:
        return self.gate_discarded / self.gate_checked if self.gate_checked else 0.0

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "detections": self.detections,
            "new_candidates": self.new_candidates,
            "suppressed_bbox": self.suppressed_bbox,
            "suppressed_pose": self.suppressed_pose,
            "accepted": self.accepted,
            "gate_checked": self.gate_checked,
            "gate_discarded": self.gate_discarded,
            "gate_discard_rate": self.gate_discard_rate,
            "masked_fraction": self.masked_fraction,
        }


@dataclass
class LoopResult:
    instances: list[Instance]
    iterations: list[IterationStats]
    config: LoopConfig
    discarded: list[Instance] = field(default_factory=list)
    error: str | None = None

    @property
    def masked_fractions(self) -> list[float]:
        return [s.masked_fraction for s in self.iterations]

    def to_results_json(self, image_id) -> list[dict]:
        return [inst.to_result_json(image_id) for inst in self.instances]

    def provenance_json(self, image_id) -> dict:
        return {
            "image_id": image_id,
            "config": self.config.to_json(),
            "error": self.error,
            "iterations": [s.to_json() for s in self.iterations],
            "instances": [inst.provenance_json() for inst in self.instances],
            "discarded": [inst.provenance_json() for inst in self.discarded],
        }


def _pose_one(image, inst: Instance, backends: BackendSet, config: LoopConfig) -> None:
    """Estimate the instance's pose on its mask-conditioned crop."""
    if inst.mask.area > 0:
        conditioned = semi_transparent_blend(image, inst.mask, config.alpha)
    else:
        # no instance mask: plain box-conditioned crop
        conditioned = image
    crop, transform = crop_expand(
        conditioned, inst.bbox, config.crop_padding, config.crop_aspect
    )
    pose = backends.pose_estimator.pose(crop, transform, config.skeleton_id)
    inst.pose = pose
    inst.pose_score = pose.score(config.loop_prompts.t_c)


def _segment_and_gate(
    image,
    inst: Instance,
    context: list[Instance],
    backends: BackendSet,
    policy: PromptPolicy,
    config: LoopConfig,
    stats: IterationStats | None,
    iteration: int,
    gate: bool,
) -> bool:
    """Prompt the segmenter for one instance and adopt the refined mask if it
    survives the consistency gate. Returns True when the mask changed."""
    skeleton = get_skeleton(config.skeleton_id)
    others = [o for o in context if o is not inst]
    max_iou = max((bbox_iou(inst.bbox, o.bbox) for o in others), default=0.0)
    other_poses = [o.pose for o in others if o.pose is not None]
    prompts = build_prompt_set(
        inst.pose, inst.bbox, other_poses, skeleton, policy, max_iou
    )
    if not prompts.positives:
        inst.log("segment-skipped", iteration, reason="no keypoint above threshold")
        return False
    try:
        refined, mask_score = backends.segmenter.segment(image, prompts)
    except (BackendRefused, BackendOpError) as exc:
        inst.log("segment-failed", iteration, reason=str(exc))
        return False
    if refined.shape != inst.mask.shape:
        inst.log("segment-failed", iteration, reason="mask dimensions mismatch")
        return False
    if refined.area == 0:
        inst.log("segment-failed", iteration, reason="empty refined mask")
        return False

    adopt = True
    gate_json = None
    if gate:
        positives = inst.confident_keypoints(policy.t_c)
        negatives = [
            pt
            for o in others
            for pt in o.confident_keypoints(policy.t_c)
        ]
        result = mask_gate(inst.mask, refined, positives, negatives)
        adopt = result.refined_kept
        gate_json = result.to_json()
        if stats is not None:
            stats.gate_checked += 1
            if not adopt:
                stats.gate_discarded += 1
    if not adopt:
        inst.log("mask-gate-kept-original", iteration, gate=gate_json)
        return False
    inst.mask = refined
    inst.mask_score = mask_score
    box = tight_bbox(refined, score=inst.bbox.score)
    if box is not None:
        inst.bbox = box
    detail = {"prompts": len(prompts.positives), "mask_score": mask_score}
    if gate_json is not None:
        detail["gate"] = gate_json
    inst.log("mask-refined", iteration, **detail)
    return True


def run_loop(image: np.ndarray, backends: BackendSet, config: LoopConfig) -> LoopResult:
    """Run the full detect/pose/segment/mask-out loop on one image.

    Each iteration detects on the composite with all accepted masks blacked
    out, deduplicates the new batch by box NMS, poses each survivor on its
    conditioned crop, deduplicates across iterations by pose NMS, then
    prompts the segmenter and gates the refined mask. The loop stops when an
    iteration accepts nothing new or the iteration cap is reached.

    Transport-level backend failure aborts with a partial result and the
    error recorded; a per-instance segmenter refusal just keeps the detector
    mask for that instance.
    """
    image = require_rgb(image)
    img_h, img_w = image.shape[:2]
    skeleton = get_skeleton(config.skeleton_id)
    accepted: list[Instance] = []
    discarded: list[Instance] = []
    iterations: list[IterationStats] = []
    union = np.zeros((img_h, img_w), dtype=bool)
    error = None
    next_id = 1

    try:
        backends.handshake_all()
        for iteration in range(1, config.max_iterations + 1):
            stats = IterationStats(iteration=iteration)
            composite = mask_out(image, BinaryMask(union)) if union.any() else image
            detections = backends.detector.detect(composite)
            stats.detections = len(detections)

            candidates: list[Instance] = []
            for det in detections:
                if det.score < config.det_score_min:
                    continue
                if det.mask is not None and det.mask.shape != (img_h, img_w):
                    raise ProtocolError(
                        f"detector mask {det.mask.shape} does not match image"
                    )
                inst = Instance(
                    id=0,
                    iteration_born=iteration,
                    bbox=replace(det.bbox, score=det.score),
                    mask=det.mask if det.mask is not None else BinaryMask.zeros(img_w, img_h),
                    det_score=det.score,
                    mask_score=det.score if det.mask is not None else 0.0,
                )
                inst.log("detected", iteration, score=det.score,
                         has_mask=det.mask is not None)
                candidates.append(inst)
            stats.new_candidates = len(candidates)

            # box NMS deduplicates within the new batch only; duplicates of
            # already-accepted instances fall to pose NMS, which can tell
            # overlapping people apart where boxes cannot
            kept_idx = bbox_nms([c.bbox for c in candidates], config.bbox_nms_iou)
            batch = []
            for i, cand in enumerate(candidates):
                if i in kept_idx:
                    batch.append(cand)
                else:
                    cand.log("suppressed", iteration, stage="bbox-nms")
                    discarded.append(cand)
            stats.suppressed_bbox = len(candidates) - len(batch)

            for inst in batch:
                _pose_one(image, inst, backends, config)
                inst.log("pose-estimated", iteration, score=inst.pose_score)

            poses = [a.pose for a in accepted] + [b.pose for b in batch]
            areas = [a.area_for_oks() for a in accepted] + [b.area_for_oks() for b in batch]
            kept_idx = pose_nms(
                poses,
                areas,
                skeleton,
                config.pose_nms_oks,
                t_c=config.loop_prompts.t_c,
                n_anchors=len(accepted),
            )
            survivors = []
            for j, inst in enumerate(batch):
                if len(accepted) + j in kept_idx:
                    survivors.append(inst)
                else:
                    inst.log("suppressed", iteration, stage="pose-nms")
                    discarded.append(inst)
            stats.suppressed_pose = len(batch) - len(survivors)

            # a survivor without a pose cannot be deduplicated by keypoints;
            # fall back to box overlap against accepted instances
            deduped = []
            for inst in survivors:
                if inst.pose is None and any(
                    bbox_iou(inst.bbox, a.bbox) > config.bbox_nms_iou for a in accepted
                ):
                    inst.log("suppressed", iteration, stage="bbox-vs-accepted")
                    discarded.append(inst)
                    stats.suppressed_pose += 1
                else:
                    deduped.append(inst)
            survivors = deduped

            context = accepted + survivors
            for inst in survivors:
                if inst.pose is None:
                    inst.log("segment-skipped", iteration, reason="no pose")
                    continue
                changed = _segment_and_gate(
                    image,
                    inst,
                    context,
                    backends,
                    config.loop_prompts,
                    config,
                    stats,
                    iteration,
                    gate=config.pmc_gate,
                )
                if changed and config.rerun_pose_after_refine:
                    _pose_one(image, inst, backends, config)
                    inst.log("pose-estimated", iteration, score=inst.pose_score,
                             after="mask-refined")

            for inst in survivors:
                inst.id = next_id
                next_id += 1
                accepted.append(inst)
                union |= inst.mask.bits
            stats.accepted = len(survivors)
            stats.masked_fraction = float(np.count_nonzero(union)) / (img_h * img_w)
            iterations.append(stats)
            if not survivors:
                break
    except ProtocolError as exc:
        error = str(exc)

    result = LoopResult(
        instances=accepted,
        iterations=iterations,
        config=config,
        discarded=discarded,
        error=error,
    )
    if config.refine_after_loop and error is None:
        refine_once(image, result.instances, backends, config)
    return result


def refine_once(
    image: np.ndarray,
    instances: list[Instance],
    backends: BackendSet,
    config: LoopConfig,
    policy: PromptPolicy | None = None,
    rerun_pose: bool | None = None,
) -> list[Instance]:
    """One segment/gate/(optional pose) pass over existing instances.

    No re-detection happens; the consistency gate always runs, so a worse
    refined mask can only be discarded, never adopted. Instances are updated
    in place and returned.
    """
    image = require_rgb(image)
    if policy is None:
        policy = config.refine_prompts
    if rerun_pose is None:
        rerun_pose = config.rerun_pose_after_refine
    backends.handshake_all()
    for inst in instances:
        if inst.pose is None:
            inst.log("segment-skipped", 0, reason="no pose", pass_="refine")
            continue
        changed = _segment_and_gate(
            image,
            inst,
            instances,
            backends,
            policy,
            config,
            None,
            iteration=0,
            gate=True,
        )
        if changed and rerun_pose:
            _pose_one(image, inst, backends, config)
            inst.log("pose-estimated", 0, score=inst.pose_score, pass_="refine")
    return instances
