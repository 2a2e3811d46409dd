"""Person-detector adapters.

Engines:

* ``contour`` — classical, dependency-free: threshold the image, take
  person-shaped connected components as detections, component pixels as the
  instance mask, fill ratio as the score. No checkpoint; honest about being
  a blob detector, and sufficient to drive the loop on simple footage.
* ``torchscript`` — any scripted detection model taking a float (1, 3, H, W)
  tensor in [0, 1] and returning either a dict or a one-element list of
  dicts with ``boxes`` (N, 4) xyxy, ``scores`` (N,), optional ``labels``
  and ``masks`` (N, 1, H, W) or (N, H, W); torchvision detection models
  scripted with ``torch.jit.script`` fit.
"""

from __future__ import annotations

import numpy as np

from .protocol import Adapter, OpError, decode_image, mask_to_rle


class ContourDetector(Adapter):
    kind = "detector"
    emits_masks = True

    def __init__(self, min_area: int = 150, max_aspect: float = 6.0):
        self.min_area = min_area
        self.max_aspect = max_aspect

    def prepare(self) -> None:
        import cv2  # noqa: F401  (verified importable up front)

    def op_detect(self, payload: dict) -> dict:
        import cv2

        image = decode_image(payload.get("image") or {})
        gray = cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)
        # pure black marks already-processed (masked-out) instances per the
        # protocol; a loop-compatible detector must not fire on it
        consumed = ~image.any(axis=2)
        live = gray[~consumed]
        if live.size == 0 or int(live.max()) - int(live.min()) < 8:
            return {"detections": []}  # featureless frame
        _, fg = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        fg[consumed] = 0
        # people are assumed to be the minority side of the split
        if np.count_nonzero(fg) > (fg.size - np.count_nonzero(consumed)) / 2:
            fg = 255 - fg
            fg[consumed] = 0
        n, labels, stats, _ = cv2.connectedComponentsWithStats(fg, connectivity=8)
        detections = []
        for i in range(1, n):
            x = float(stats[i, cv2.CC_STAT_LEFT])
            y = float(stats[i, cv2.CC_STAT_TOP])
            w = float(stats[i, cv2.CC_STAT_WIDTH])
            h = float(stats[i, cv2.CC_STAT_HEIGHT])
            area = float(stats[i, cv2.CC_STAT_AREA])
            if area < self.min_area:
                continue
            aspect = max(w / h, h / w) if min(w, h) > 0 else float("inf")
            if aspect > self.max_aspect:
                continue
            fill = area / (w * h)
            detections.append(
                {
                    "bbox": [x, y, w, h],
                    "score": float(min(1.0, max(0.0, fill))),
                    "mask": mask_to_rle(labels == i),
                }
            )
        detections.sort(key=lambda d: -d["score"])
        return {"detections": detections}


class TorchscriptDetector(Adapter):
    kind = "detector"
    emits_masks = True

    def __init__(self, checkpoint: str, score_min: float = 0.05,
                 person_label: int = 1):
        self.checkpoint = checkpoint
        self.score_min = score_min
        self.person_label = person_label

    def prepare(self) -> None:
        import torch

        self._torch = torch
        self._model = torch.jit.load(self.checkpoint, map_location="cpu")
        self._model.eval()

    def op_detect(self, payload: dict) -> dict:
        torch = self._torch
        image = decode_image(payload.get("image") or {})
        tensor = torch.from_numpy(image).permute(2, 0, 1).float() / 255.0
        with torch.no_grad():
            output = self._model(tensor.unsqueeze(0))
        if isinstance(output, (list, tuple)):
            if len(output) == 2 and isinstance(output[1], list):
                output = output[1]  # scripted torchvision returns (losses, detections)
            output = output[0]
        if not isinstance(output, dict):
            raise OpError("bad_model", f"model returned {type(output).__name__}, "
                          "expected a detection dict")
        boxes = output["boxes"].cpu().numpy()
        scores = output["scores"].cpu().numpy()
        labels = output.get("labels")
        labels = (
            labels.cpu().numpy()
            if labels is not None
            else np.full(len(boxes), self.person_label)
        )
        masks = output.get("masks")
        if masks is not None:
            masks = masks.cpu().numpy()
            if masks.ndim == 4:
                masks = masks[:, 0]
        h, w = image.shape[:2]
        detections = []
        for i in range(len(boxes)):
            if labels[i] != self.person_label or scores[i] < self.score_min:
                continue
            x1, y1, x2, y2 = (float(v) for v in boxes[i])
            entry = {
                "bbox": [x1, y1, max(0.0, x2 - x1), max(0.0, y2 - y1)],
                "score": float(min(1.0, max(0.0, scores[i]))),
                "mask": None,
            }
            if masks is not None:
                bits = masks[i] >= 0.5
                if bits.shape == (h, w):
                    entry["mask"] = mask_to_rle(bits)
            detections.append(entry)
        detections.sort(key=lambda d: -d["score"])
        return {"detections": detections}


def build(engine: str, checkpoint: str | None) -> Adapter:
    if engine == "contour":
        return ContourDetector()
    if engine == "torchscript":
        if not checkpoint:
            raise SystemExit("detector --engine torchscript needs --checkpoint")
        return TorchscriptDetector(checkpoint)
    raise SystemExit(f"unknown detector engine {engine!r}")
