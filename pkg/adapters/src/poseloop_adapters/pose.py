"""Top-down pose adapters. Replies are keypoints in crop coordinates.

Engines:

* ``prior`` — a classical stand-in: threshold the conditioned crop, take
  the dominant foreground blob, and place a canonical 17-point body plan
  into its tight box. Confidence reflects whether the point landed on the
  blob. Weak by design but honest about it; useful for wiring and tests.
* ``torchscript`` — any scripted heatmap model taking a float
  (1, 3, H, W) tensor in [0, 1] and returning (1, K, h, w) heatmaps;
  keypoints decode from the per-channel argmax, confidence from the peak.
"""

from __future__ import annotations

import numpy as np

from .protocol import Adapter, OpError, decode_image

# canonical body plan relative to a person's tight box (x, y fractions)
BODY_PLAN = (
    (0.50, 0.08), (0.53, 0.06), (0.47, 0.06), (0.57, 0.08), (0.43, 0.08),
    (0.68, 0.22), (0.32, 0.22), (0.74, 0.38), (0.26, 0.38),
    (0.78, 0.52), (0.22, 0.52),
    (0.60, 0.55), (0.40, 0.55), (0.58, 0.74), (0.42, 0.74),
    (0.57, 0.93), (0.43, 0.93),
)

SKELETON_SIZES = {"coco17": 17, "merged22": 22}


def _check_skeleton(payload: dict, supported: tuple[str, ...]) -> str:
    name = payload.get("skeleton")
    if name not in supported:
        raise OpError("bad_skeleton", f"supported skeletons: {list(supported)}")
    return name


class PriorPose(Adapter):
    kind = "pose"
    skeletons = ("coco17",)

    def prepare(self) -> None:
        import cv2  # noqa: F401  (verified importable up front)

    def op_pose(self, payload: dict) -> dict:
        import cv2

        _check_skeleton(payload, self.skeletons)
        crop = decode_image(payload.get("image") or {})
        gray = cv2.cvtColor(crop, cv2.COLOR_RGB2GRAY)
        _, fg = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
        # the conditioned instance is the brighter side; flip if inverted
        if fg.mean() > 127:
            fg = 255 - fg
        n, labels, stats, _ = cv2.connectedComponentsWithStats(fg, connectivity=8)
        if n <= 1:
            x0, y0, w, h = 0, 0, crop.shape[1], crop.shape[0]
            blob = None
        else:
            biggest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
            x0 = int(stats[biggest, cv2.CC_STAT_LEFT])
            y0 = int(stats[biggest, cv2.CC_STAT_TOP])
            w = int(stats[biggest, cv2.CC_STAT_WIDTH])
            h = int(stats[biggest, cv2.CC_STAT_HEIGHT])
            blob = labels == biggest
        keypoints = []
        for fx, fy in BODY_PLAN:
            x = x0 + fx * w
            y = y0 + fy * h
            px, py = int(x), int(y)
            on_blob = (
                blob is not None
                and 0 <= py < blob.shape[0]
                and 0 <= px < blob.shape[1]
                and bool(blob[py, px])
            )
            keypoints.append([float(x), float(y), 0.6 if on_blob else 0.25])
        return {"keypoints": keypoints}


class TorchscriptPose(Adapter):
    kind = "pose"

    def __init__(self, checkpoint: str, skeleton: str = "coco17"):
        if skeleton not in SKELETON_SIZES:
            raise SystemExit(f"unknown skeleton {skeleton!r}")
        self.checkpoint = checkpoint
        self.skeletons = (skeleton,)
        self._n_keypoints = SKELETON_SIZES[skeleton]

    def prepare(self) -> None:
        import torch

        self._torch = torch
        self._model = torch.jit.load(self.checkpoint, map_location="cpu")
        self._model.eval()

    def op_pose(self, payload: dict) -> dict:
        torch = self._torch
        _check_skeleton(payload, self.skeletons)
        crop = decode_image(payload.get("image") or {})
        tensor = torch.from_numpy(crop).permute(2, 0, 1).float() / 255.0
        with torch.no_grad():
            heatmaps = self._model(tensor.unsqueeze(0))
        if isinstance(heatmaps, (list, tuple)):
            heatmaps = heatmaps[0]
        hm = heatmaps.cpu().numpy()
        if hm.ndim == 4:
            hm = hm[0]
        if hm.shape[0] != self._n_keypoints:
            raise OpError(
                "bad_model",
                f"model emits {hm.shape[0]} heatmaps, skeleton needs {self._n_keypoints}",
            )
        ch, cw = crop.shape[:2]
        hh, hw = hm.shape[1:]
        keypoints = []
        for k in range(self._n_keypoints):
            flat = int(np.argmax(hm[k]))
            py, px = divmod(flat, hw)
            conf = float(np.clip(hm[k, py, px], 0.0, 1.0))
            keypoints.append(
                [(px + 0.5) * cw / hw, (py + 0.5) * ch / hh, conf]
            )
        return {"keypoints": keypoints}


def build(engine: str, checkpoint: str | None, skeleton: str) -> Adapter:
    if engine == "prior":
        return PriorPose()
    if engine == "torchscript":
        if not checkpoint:
            raise SystemExit("pose --engine torchscript needs --checkpoint")
        return TorchscriptPose(checkpoint, skeleton)
    raise SystemExit(f"unknown pose engine {engine!r}")
