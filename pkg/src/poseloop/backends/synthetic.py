"""Deterministic rule-based stand-ins for the three neural models.

A synthetic scene lists full-silhouette instance masks with unique stacking
depths plus ground-truth keypoints. Everything the rules answer is a pure
function of (scene, request): the detector reads the mask-out state from the
black pixels of the composite it receives, the pose rule reads the
conditioning mask by comparing the crop against the scene render, and the
segmenter assigns point prompts to instances by visible-pixel ownership.
Scene files are JSON with COCO-style RLE masks (see ``scene_to_json``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import BBox, BinaryMask, Pose, get_skeleton, tight_bbox
from ..imaging import CropTransform, require_rgb
from ..prompting import PromptSet
from .protocol import BackendOpError, BaseHandler, Detection, HandshakeInfo, PROTOCOL_VERSION

__all__ = [
    "SceneInstance",
    "SyntheticScene",
    "scene_to_json",
    "scene_from_json",
    "load_scene",
    "save_scene",
    "render_scene",
    "SyntheticDetector",
    "SyntheticPoseEstimator",
    "SyntheticSegmenter",
    "DEFAULT_V_DET",
]

DEFAULT_V_DET = 0.5

BACKGROUND_COLOR = (64, 64, 64)


@dataclass(frozen=True)
class SceneInstance:
    """One scene person: full-silhouette mask, labeled keypoints, stack depth.

    Keypoints are (K, 3) rows of x, y, v with COCO-style flags: 0 unlabeled,
    1 labeled but occluded, 2 labeled and visible. Lower depth is in front.
    """

    mask: BinaryMask
    keypoints: np.ndarray
    depth: int
    skeleton_id: str = "coco17"


@dataclass
class SyntheticScene:
    width: int
    height: int
    instances: list[SceneInstance] = field(default_factory=list)

    def __post_init__(self):
        depths = [inst.depth for inst in self.instances]
        if len(set(depths)) != len(depths):
            raise ValueError(f"instance depths must be unique, got {depths}")
        for i, inst in enumerate(self.instances):
            if inst.mask.shape != (self.height, self.width):
                raise ValueError(
                    f"instance {i} mask {inst.mask.shape} does not match scene "
                    f"({self.height}, {self.width})"
                )
            count = get_skeleton(inst.skeleton_id).keypoint_count
            if inst.keypoints.shape != (count, 3):
                raise ValueError(
                    f"instance {i} keypoints shape {inst.keypoints.shape}, "
                    f"expected ({count}, 3)"
                )

    def top_of_stack(self) -> np.ndarray:
        """Per-pixel index of the front-most instance, -1 for background."""
        top = np.full((self.height, self.width), -1, dtype=np.int32)
        order = sorted(range(len(self.instances)),
                       key=lambda i: -self.instances[i].depth)
        for i in order:  # back to front, front overwrites
            top[self.instances[i].mask.bits] = i
        return top

    def visible_mask(self, index: int) -> BinaryMask:
        return BinaryMask(self.top_of_stack() == index)


def scene_to_json(scene: SyntheticScene) -> dict:
    return {
        "type": "synthetic_scene",
        "width": scene.width,
        "height": scene.height,
        "instances": [
            {
                "depth": inst.depth,
                "skeleton": inst.skeleton_id,
                "mask": inst.mask.to_rle(compressed=True),
                "keypoints": [[float(x), float(y), int(v)] for x, y, v in inst.keypoints],
            }
            for inst in scene.instances
        ],
    }


def scene_from_json(obj: dict) -> SyntheticScene:
    if obj.get("type") != "synthetic_scene":
        raise ValueError("not a synthetic scene file (missing type marker)")
    instances = [
        SceneInstance(
            mask=BinaryMask.from_rle(item["mask"]),
            keypoints=np.asarray(item["keypoints"], dtype=np.float64),
            depth=int(item["depth"]),
            skeleton_id=item.get("skeleton", "coco17"),
        )
        for item in obj.get("instances", [])
    ]
    return SyntheticScene(int(obj["width"]), int(obj["height"]), instances)


def load_scene(path) -> SyntheticScene:
    with open(path, "r", encoding="utf-8") as f:
        return scene_from_json(json.load(f))


def save_scene(scene: SyntheticScene, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_json(scene), f, sort_keys=True, indent=1)
        f.write("\n")


def instance_color(index: int) -> tuple[int, int, int]:
    """Distinct flat color per instance; channels stay in [16, 236] so pure
    black never appears and alpha-darkening of any channel is lossy."""
    return (
        16 + (index * 97) % 221,
        16 + (index * 57 + 80) % 221,
        16 + (index * 31 + 160) % 221,
    )


def render_scene(scene: SyntheticScene) -> np.ndarray:
    """Deterministic flat-color rendering resolving overlap by depth."""
    image = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    image[:] = BACKGROUND_COLOR
    top = scene.top_of_stack()
    for i in range(len(scene.instances)):
        image[top == i] = instance_color(i)
    return image


def _half_up(v: float) -> int:
    return math.floor(v + 0.5)


def _box_pixels(box: BBox, width: int, height: int) -> np.ndarray:
    """Rasterize a box to a pixel mask with half-up edge rounding."""
    bits = np.zeros((height, width), dtype=bool)
    x0 = max(0, _half_up(box.x))
    y0 = max(0, _half_up(box.y))
    x1 = min(width, _half_up(box.x2))
    y1 = min(height, _half_up(box.y2))
    if x1 > x0 and y1 > y0:
        bits[y0:y1, x0:x1] = True
    return bits


class _SceneRules:
    """Shared state for the three synthetic endpoints."""

    def __init__(self, scene: SyntheticScene, v_det: float = DEFAULT_V_DET):
        if not 0.0 < v_det <= 1.0:
            raise ValueError(f"v_det {v_det} outside (0, 1]")
        self.scene = scene
        self.v_det = v_det
        self.render = render_scene(scene)
        self.top = scene.top_of_stack()

    def union_from_composite(self, image: np.ndarray) -> np.ndarray:
        """Masked-out pixels are exactly the pure-black ones: the renderer
        never emits black, so blackness encodes the mask-out state."""
        image = require_rgb(image)
        if image.shape != self.render.shape:
            raise BackendOpError(
                "bad_image",
                f"image {image.shape[1]}x{image.shape[0]} does not match scene "
                f"{self.scene.width}x{self.scene.height}",
            )
        return ~image.any(axis=2)

    def detect(self, image: np.ndarray) -> list[Detection]:
        union = self.union_from_composite(image)
        detections = []
        for i, inst in enumerate(self.scene.instances):
            own_left = inst.mask.bits & ~union
            own_area = int(np.count_nonzero(own_left))
            if own_area == 0:
                continue
            visible_left = (self.top == i) & ~union
            ratio = int(np.count_nonzero(visible_left)) / own_area
            if ratio < self.v_det:
                continue
            mask = BinaryMask(own_left)
            detections.append(
                Detection(bbox=tight_bbox(mask, score=ratio), score=ratio, mask=mask)
            )
        return detections

    def _conditioning_match(self, crop: np.ndarray, transform: CropTransform) -> np.ndarray:
        """Pixels of the crop equal to the scene render: the region the pose
        conditioning left untouched (the instance mask, or everything when
        no darkening was applied)."""
        ch, cw = crop.shape[:2]
        match = np.zeros((ch, cw), dtype=bool)
        x0, y0 = transform.x_offset, transform.y_offset
        sx0, sy0 = max(0, x0), max(0, y0)
        sx1 = min(self.scene.width, x0 + cw)
        sy1 = min(self.scene.height, y0 + ch)
        if sx1 > sx0 and sy1 > sy0:
            crop_part = crop[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]
            render_part = self.render[sy0:sy1, sx0:sx1]
            match[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = np.all(
                crop_part == render_part, axis=2
            )
        return match

    def pick_pose_target(self, crop: np.ndarray, transform: CropTransform) -> int:
        if not self.scene.instances:
            raise BackendOpError("no_instances", "scene has no instances to pose")
        match = self._conditioning_match(crop, transform)
        counts = []
        ch, cw = crop.shape[:2]
        x0, y0 = transform.x_offset, transform.y_offset
        for i in range(len(self.scene.instances)):
            vis = self.top == i
            sx0, sy0 = max(0, x0), max(0, y0)
            sx1 = min(self.scene.width, x0 + cw)
            sy1 = min(self.scene.height, y0 + ch)
            if sx1 <= sx0 or sy1 <= sy0:
                counts.append(0)
                continue
            in_crop = vis[sy0:sy1, sx0:sx1] & match[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]
            counts.append(int(np.count_nonzero(in_crop)))
        best = max(range(len(counts)), key=lambda i: (counts[i], -i))
        if counts[best] > 0:
            return best
        # no visible pixel under the conditioning: fall back to the instance
        # whose visible centroid is nearest to the crop center
        cx = x0 + cw / 2.0
        cy = y0 + ch / 2.0
        best, best_d = 0, float("inf")
        for i in range(len(self.scene.instances)):
            ys, xs = np.nonzero(self.top == i)
            if xs.size == 0:
                ys, xs = np.nonzero(self.scene.instances[i].mask.bits)
                if xs.size == 0:
                    continue
            d = (xs.mean() - cx) ** 2 + (ys.mean() - cy) ** 2
            if d < best_d:
                best, best_d = i, d
        return best

    def pose(self, crop: np.ndarray, transform: CropTransform, skeleton_id: str) -> np.ndarray:
        """Ground-truth keypoints of the conditioned instance, crop coords.

        Confidence 0.9 for keypoints whose pixel is visible (top of stack and
        not blacked out in the crop), 0.2 for in-crop but covered ones, and
        0.0 outside the crop or unlabeled.
        """
        target = self.pick_pose_target(crop, transform)
        inst = self.scene.instances[target]
        if inst.skeleton_id != skeleton_id:
            raise BackendOpError(
                "bad_skeleton",
                f"scene uses {inst.skeleton_id!r}, request asked {skeleton_id!r}",
            )
        ch, cw = crop.shape[:2]
        out = np.zeros((inst.keypoints.shape[0], 3), dtype=np.float64)
        for j, (x, y, v) in enumerate(inst.keypoints):
            if v <= 0:
                continue
            crop_x, crop_y = transform.to_crop(x, y)
            px, py = _half_up(crop_x), _half_up(crop_y)
            if not (0 <= px < cw and 0 <= py < ch):
                out[j] = [crop_x, crop_y, 0.0]
                continue
            full_px, full_py = _half_up(x), _half_up(y)
            visible = (
                0 <= full_px < self.scene.width
                and 0 <= full_py < self.scene.height
                and self.top[full_py, full_px] == target
                and crop[py, px].any()
            )
            out[j] = [crop_x, crop_y, 0.9 if visible else 0.2]
        return out

    def segment(self, image: np.ndarray, prompts: PromptSet) -> tuple[BinaryMask, float]:
        """Visible mask of the instance owning most positive prompts.

        Ties go to the instance whose visible centroid is nearest to the
        prompt centroid. A box prompt clips the result; with a box and no
        positives the rule degenerates to box-only prompting and returns
        everything visible inside the box (merged instances and all).
        """
        image = require_rgb(image)
        if image.shape[:2] != (self.scene.height, self.scene.width):
            raise BackendOpError("bad_image", "image does not match scene dimensions")
        h, w = self.scene.height, self.scene.width
        if not prompts.positives:
            if prompts.bbox is None:
                raise BackendOpError("bad_prompts", "need positive points or a box")
            box_bits = _box_pixels(prompts.bbox, w, h)
            merged = np.zeros((h, w), dtype=bool)
            for i in range(len(self.scene.instances)):
                vis = self.top == i
                if np.count_nonzero(vis & box_bits):
                    merged |= vis
            return BinaryMask(merged & box_bits), 0.5

        counts = [0] * len(self.scene.instances)
        for x, y in prompts.positives:
            px, py = _half_up(x), _half_up(y)
            if 0 <= px < w and 0 <= py < h:
                owner = int(self.top[py, px])
                if owner >= 0:
                    counts[owner] += 1
        if not counts or max(counts) == 0:
            return BinaryMask.zeros(w, h), 0.0
        top_count = max(counts)
        tied = [i for i, c in enumerate(counts) if c == top_count]
        if len(tied) == 1:
            target = tied[0]
        else:
            pcx = sum(p[0] for p in prompts.positives) / len(prompts.positives)
            pcy = sum(p[1] for p in prompts.positives) / len(prompts.positives)
            target, best_d = tied[0], float("inf")
            for i in tied:
                ys, xs = np.nonzero(self.top == i)
                if xs.size == 0:
                    continue
                d = (xs.mean() - pcx) ** 2 + (ys.mean() - pcy) ** 2
                if d < best_d:
                    target, best_d = i, d
        bits = self.top == target
        if prompts.bbox is not None:
            bits = bits & _box_pixels(prompts.bbox, w, h)
        return BinaryMask(bits), top_count / len(prompts.positives)


def _scene_skeletons(scene: SyntheticScene) -> tuple[str, ...]:
    names = sorted({inst.skeleton_id for inst in scene.instances})
    return tuple(names) if names else ("coco17",)


class SyntheticDetector:
    """In-process detector endpoint backed by scene rules."""

    def __init__(self, scene: SyntheticScene, v_det: float = DEFAULT_V_DET):
        self._rules = _SceneRules(scene, v_det)

    def handshake(self) -> HandshakeInfo:
        return HandshakeInfo(
            PROTOCOL_VERSION, "detector", _scene_skeletons(self._rules.scene), True
        )

    def detect(self, image: np.ndarray) -> list[Detection]:
        return self._rules.detect(image)

    def close(self) -> None:
        pass


class SyntheticPoseEstimator:
    def __init__(self, scene: SyntheticScene, v_det: float = DEFAULT_V_DET):
        self._rules = _SceneRules(scene, v_det)

    def handshake(self) -> HandshakeInfo:
        return HandshakeInfo(
            PROTOCOL_VERSION, "pose", _scene_skeletons(self._rules.scene), False
        )

    def pose(self, crop: np.ndarray, transform: CropTransform, skeleton_id: str) -> Pose:
        pts = self._rules.pose(crop, transform, skeleton_id)
        pts = pts.copy()
        pts[:, 0] += transform.x_offset
        pts[:, 1] += transform.y_offset
        return Pose(skeleton_id, pts)

    def close(self) -> None:
        pass


class SyntheticSegmenter:
    def __init__(self, scene: SyntheticScene, v_det: float = DEFAULT_V_DET):
        self._rules = _SceneRules(scene, v_det)

    def handshake(self) -> HandshakeInfo:
        return HandshakeInfo(
            PROTOCOL_VERSION, "segmenter", _scene_skeletons(self._rules.scene), False
        )

    def segment(self, image: np.ndarray, prompts: PromptSet) -> tuple[BinaryMask, float]:
        if not prompts.positives:
            raise ValueError("segment requires at least one positive prompt")
        return self._rules.segment(image, prompts)

    def close(self) -> None:
        pass


class SyntheticHandler(BaseHandler):
    """Wire-protocol server handler exposing one synthetic endpoint."""

    def __init__(self, scene: SyntheticScene, kind: str, v_det: float = DEFAULT_V_DET):
        if kind not in ("detector", "pose", "segmenter"):
            raise ValueError(f"unknown backend kind {kind!r}")
        self.kind = kind
        self.skeletons = _scene_skeletons(scene)
        self.emits_masks = kind == "detector"
        self._rules = _SceneRules(scene, v_det)

    def op_detect(self, payload: dict) -> dict:
        if self.kind != "detector":
            raise BackendOpError("unknown_op", f"{self.kind} backend cannot detect")
        from .protocol import image_from_payload

        image = image_from_payload(payload.get("image") or {})
        detections = self._rules.detect(image)
        return {
            "detections": [
                {
                    "bbox": [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
                    "score": d.score,
                    "mask": d.mask.to_rle(compressed=True) if d.mask else None,
                }
                for d in detections
            ]
        }

    def op_pose(self, payload: dict) -> dict:
        if self.kind != "pose":
            raise BackendOpError("unknown_op", f"{self.kind} backend cannot pose")
        from .protocol import image_from_payload

        crop = image_from_payload(payload.get("image") or {})
        try:
            transform = CropTransform.from_json(payload["transform"])
            skeleton = str(payload["skeleton"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendOpError("bad_request", f"bad pose request: {exc}") from None
        pts = self._rules.pose(crop, transform, skeleton)
        return {"keypoints": [[float(x), float(y), float(c)] for x, y, c in pts]}

    def op_segment(self, payload: dict) -> dict:
        if self.kind != "segmenter":
            raise BackendOpError("unknown_op", f"{self.kind} backend cannot segment")
        from .protocol import image_from_payload

        image = image_from_payload(payload.get("image") or {})
        try:
            prompts = PromptSet.from_json(payload.get("prompts") or {})
        except (TypeError, ValueError) as exc:
            raise BackendOpError("bad_request", f"bad prompts: {exc}") from None
        mask, score = self._rules.segment(image, prompts)
        return {"mask": mask.to_rle(compressed=True), "score": score}
