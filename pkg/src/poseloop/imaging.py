"""Image representation and the compositing rules that condition detection and pose.

Images are (height, width, 3) uint8 RGB numpy arrays throughout the package.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .geometry import BBox, BinaryMask

__all__ = [
    "require_rgb",
    "mask_out",
    "semi_transparent_blend",
    "CropTransform",
    "crop_expand",
    "load_image",
    "save_image",
    "encode_png_base64",
    "decode_png_base64",
]


def require_rgb(image: np.ndarray) -> np.ndarray:
    """Validate the (h, w, 3) uint8 layout and return the array unchanged."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) RGB image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    return image


def _check_mask_fits(image: np.ndarray, mask: BinaryMask) -> None:
    if image.shape[:2] != mask.shape:
        raise ValueError(
            f"mask {mask.shape} does not match image {image.shape[:2]}"
        )


def mask_out(image: np.ndarray, union_mask: BinaryMask) -> np.ndarray:
    """Black out every pixel under the mask; the input is left untouched."""
    image = require_rgb(image)
    _check_mask_fits(image, union_mask)
    out = image.copy()
    out[union_mask.bits] = 0
    return out


def semi_transparent_blend(
    image: np.ndarray, instance_mask: BinaryMask, alpha: float
) -> np.ndarray:
    """Keep in-mask pixels intact and scale everything else by alpha.

    Out-of-mask channels are rounded half-up to the nearest integer value.
    alpha=1 returns the image unchanged; alpha=0 blacks out the background.
    """
    image = require_rgb(image)
    _check_mask_fits(image, instance_mask)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    darkened = np.floor(image.astype(np.float64) * alpha + 0.5).astype(np.uint8)
    out = np.where(instance_mask.bits[:, :, None], image, darkened)
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class CropTransform:
    """Integer translation mapping crop coordinates to full-image coordinates."""

    x_offset: int
    y_offset: int

    def to_full(self, x: float, y: float) -> tuple[float, float]:
        return (x + self.x_offset, y + self.y_offset)

    def to_crop(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x_offset, y - self.y_offset)

    def points_to_full(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).copy()
        pts[:, 0] += self.x_offset
        pts[:, 1] += self.y_offset
        return pts

    def to_json(self) -> dict:
        return {"x_offset": self.x_offset, "y_offset": self.y_offset}

    @classmethod
    def from_json(cls, obj: dict) -> "CropTransform":
        return cls(int(obj["x_offset"]), int(obj["y_offset"]))


def crop_expand(
    image: np.ndarray,
    bbox: BBox,
    padding_ratio: float = 0.0,
    target_aspect: float | None = None,
) -> tuple[np.ndarray, CropTransform]:
    """Cut a padded, aspect-snapped patch around the box, zero-padding overhang.

    The box is grown by ``padding_ratio`` on both axes, then the smaller axis
    is enlarged until width/height reaches ``target_aspect`` (when given).
    Pixels are copied 1:1 (no resampling), so the returned transform is a pure
    integer translation.
    """
    image = require_rgb(image)
    img_h, img_w = image.shape[:2]
    if bbox.w <= 0 or bbox.h <= 0:
        raise ValueError(f"cannot crop around a degenerate box {bbox}")
    if bbox.x >= img_w or bbox.y >= img_h or bbox.x2 <= 0 or bbox.y2 <= 0:
        raise ValueError(f"box {bbox} lies fully outside the {img_w}x{img_h} image")
    if padding_ratio < 0:
        raise ValueError(f"padding_ratio {padding_ratio} must be >= 0")

    cx, cy = bbox.center
    w = bbox.w * (1.0 + padding_ratio)
    h = bbox.h * (1.0 + padding_ratio)
    if target_aspect is not None:
        if target_aspect <= 0:
            raise ValueError(f"target_aspect {target_aspect} must be positive")
        if w / h < target_aspect:
            w = h * target_aspect
        elif w / h > target_aspect:
            h = w / target_aspect

    crop_w = max(1, int(round(w)))
    crop_h = max(1, int(round(h)))
    x0 = int(round(cx - w / 2.0))
    y0 = int(round(cy - h / 2.0))

    canvas = np.zeros((crop_h, crop_w, 3), dtype=np.uint8)
    src_x0 = max(0, x0)
    src_y0 = max(0, y0)
    src_x1 = min(img_w, x0 + crop_w)
    src_y1 = min(img_h, y0 + crop_h)
    if src_x1 > src_x0 and src_y1 > src_y0:
        canvas[src_y0 - y0:src_y1 - y0, src_x0 - x0:src_x1 - x0] = image[
            src_y0:src_y1, src_x0:src_x1
        ]
    return canvas, CropTransform(x0, y0)


def load_image(path) -> np.ndarray:
    """Read a PNG/JPEG file as an (h, w, 3) uint8 RGB array."""
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Write an RGB array to disk; the format follows the file extension."""
    PILImage.fromarray(require_rgb(image), mode="RGB").save(path)


def encode_png_base64(image: np.ndarray) -> str:
    """PNG-encode an RGB array and wrap it in base64 for inline transport."""
    buf = io.BytesIO()
    PILImage.fromarray(require_rgb(image), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_base64(payload: str) -> np.ndarray:
    data = base64.b64decode(payload.encode("ascii"), validate=True)
    with PILImage.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
