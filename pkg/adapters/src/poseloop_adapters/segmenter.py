"""Promptable-segmenter adapters.

Engines:

* ``grabcut`` — OpenCV GrabCut seeded by the prompts: positives as sure
  foreground, negatives as sure background, the box (when present) as the
  probable-foreground region. No checkpoint needed.
* ``sam2`` — the promptable segmentation checkpoint family, loaded through
  the ``sam2`` package when installed; prompts map 1:1 onto its point and
  box inputs.

Both engines share the mask post-processing: holes up to ``max_hole_area``
pixels are filled and connected components up to ``max_sprinkle_area``
pixels are dropped.
"""

from __future__ import annotations

import numpy as np

from .protocol import Adapter, OpError, decode_image, mask_to_rle


def clean_mask(bits: np.ndarray, max_hole_area: int = 10,
               max_sprinkle_area: int = 50) -> np.ndarray:
    """Fill small holes, then drop small speckles."""
    import cv2

    bits = bits.astype(np.uint8)
    if max_hole_area > 0:
        inv = 1 - bits
        n, labels, stats, _ = cv2.connectedComponentsWithStats(inv, connectivity=4)
        for i in range(1, n):
            if stats[i, cv2.CC_STAT_AREA] <= max_hole_area:
                bits[labels == i] = 1
    if max_sprinkle_area > 0:
        n, labels, stats, _ = cv2.connectedComponentsWithStats(bits, connectivity=8)
        for i in range(1, n):
            if stats[i, cv2.CC_STAT_AREA] <= max_sprinkle_area:
                bits[labels == i] = 0
    return bits.astype(bool)


def _parse_prompts(payload: dict):
    prompts = payload.get("prompts") or {}
    positives = [(float(x), float(y)) for x, y in prompts.get("positives") or []]
    negatives = [(float(x), float(y)) for x, y in prompts.get("negatives") or []]
    box = prompts.get("bbox")
    if box is not None:
        box = [float(v) for v in box]
        if len(box) != 4:
            raise OpError("bad_request", f"bbox must be [x, y, w, h], got {box}")
    if not positives:
        raise OpError("bad_request", "segment needs at least one positive point")
    return positives, negatives, box


class GrabCutSegmenter(Adapter):
    kind = "segmenter"

    def __init__(self, max_hole_area: int = 10, max_sprinkle_area: int = 50,
                 iterations: int = 3, seed_radius: int = 4):
        self.max_hole_area = max_hole_area
        self.max_sprinkle_area = max_sprinkle_area
        self.iterations = iterations
        self.seed_radius = seed_radius

    def prepare(self) -> None:
        import cv2  # noqa: F401

    def op_segment(self, payload: dict) -> dict:
        import cv2

        image = decode_image(payload.get("image") or {})
        positives, negatives, box = _parse_prompts(payload)
        h, w = image.shape[:2]
        grid = np.full((h, w), cv2.GC_PR_BGD, dtype=np.uint8)
        if box is not None:
            x0 = max(0, int(round(box[0])))
            y0 = max(0, int(round(box[1])))
            x1 = min(w, int(round(box[0] + box[2])))
            y1 = min(h, int(round(box[1] + box[3])))
            if x1 > x0 and y1 > y0:
                grid[y0:y1, x0:x1] = cv2.GC_PR_FGD
        for x, y in positives:
            cv2.circle(grid, (int(round(x)), int(round(y))), self.seed_radius,
                       int(cv2.GC_FGD), -1)
        for x, y in negatives:
            cv2.circle(grid, (int(round(x)), int(round(y))), self.seed_radius,
                       int(cv2.GC_BGD), -1)
        bgr = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
        bgd = np.zeros((1, 65), dtype=np.float64)
        fgd = np.zeros((1, 65), dtype=np.float64)
        try:
            cv2.grabCut(bgr, grid, None, bgd, fgd, self.iterations,
                        cv2.GC_INIT_WITH_MASK)
        except cv2.error as exc:
            raise OpError("segment_failed", f"grabcut failed: {exc}") from None
        bits = np.isin(grid, (cv2.GC_FGD, cv2.GC_PR_FGD))
        bits = clean_mask(bits, self.max_hole_area, self.max_sprinkle_area)
        inside = sum(
            1 for x, y in positives
            if 0 <= int(round(y)) < h and 0 <= int(round(x)) < w
            and bits[int(round(y)), int(round(x))]
        )
        return {
            "mask": mask_to_rle(bits),
            "score": inside / len(positives),
        }


class Sam2Segmenter(Adapter):
    kind = "segmenter"

    def __init__(self, checkpoint: str, model_config: str | None = None,
                 max_hole_area: int = 10, max_sprinkle_area: int = 50):
        self.checkpoint = checkpoint
        self.model_config = model_config
        self.max_hole_area = max_hole_area
        self.max_sprinkle_area = max_sprinkle_area

    def prepare(self) -> None:
        from sam2.build_sam import build_sam2
        from sam2.sam2_image_predictor import SAM2ImagePredictor

        model = build_sam2(self.model_config, self.checkpoint, device="cpu")
        self._predictor = SAM2ImagePredictor(model)

    def op_segment(self, payload: dict) -> dict:
        image = decode_image(payload.get("image") or {})
        positives, negatives, box = _parse_prompts(payload)
        points = np.asarray(positives + negatives, dtype=np.float32)
        labels = np.asarray([1] * len(positives) + [0] * len(negatives))
        box_xyxy = None
        if box is not None:
            box_xyxy = np.asarray(
                [box[0], box[1], box[0] + box[2], box[1] + box[3]], dtype=np.float32
            )
        self._predictor.set_image(image)
        masks, scores, _ = self._predictor.predict(
            point_coords=points,
            point_labels=labels,
            box=box_xyxy,
            multimask_output=False,
        )
        bits = clean_mask(
            masks[0].astype(bool), self.max_hole_area, self.max_sprinkle_area
        )
        return {"mask": mask_to_rle(bits), "score": float(scores[0])}


def build(engine: str, checkpoint: str | None, model_config: str | None,
          max_hole_area: int, max_sprinkle_area: int) -> Adapter:
    if engine == "grabcut":
        return GrabCutSegmenter(max_hole_area, max_sprinkle_area)
    if engine == "sam2":
        if not checkpoint:
            raise SystemExit("segment --engine sam2 needs --checkpoint")
        return Sam2Segmenter(checkpoint, model_config, max_hole_area, max_sprinkle_area)
    raise SystemExit(f"unknown segmenter engine {engine!r}")
