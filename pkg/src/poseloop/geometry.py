"""Core geometric types and metrics: boxes, masks, keypoints, IoU, OKS, RLE codecs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BBox",
    "Keypoint",
    "Pose",
    "SkeletonConfig",
    "BinaryMask",
    "OksUndefined",
    "bbox_iou",
    "mask_iou",
    "mask_union",
    "tight_bbox",
    "rle_encode",
    "rle_decode",
    "rle_counts_to_string",
    "rle_string_to_counts",
    "oks",
    "get_skeleton",
    "register_skeleton",
    "COCO17_SIGMAS",
]


class OksUndefined(ValueError):
    """OKS has no value: no annotated keypoint or non-positive reference area."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates: (x, y) top-left corner, extents (w, h)."""

    x: float
    y: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extents: w={self.w}, h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float, score: float = 1.0) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1, score)

    def expanded_to_contain(self, points: Iterable[tuple[float, float]]) -> "BBox":
        """Smallest box covering this box and every point."""
        x1, y1, x2, y2 = self.to_xyxy()
        for px, py in points:
            x1 = min(x1, px)
            y1 = min(y1, py)
            x2 = max(x2, px)
            y2 = max(y2, py)
        return BBox.from_xyxy(x1, y1, x2, y2, self.score)


class Keypoint:
    """One keypoint: pixel position plus confidence in [0, 1]."""

    __slots__ = ("x", "y", "confidence")

    def __init__(self, x: float, y: float, confidence: float = 1.0):
        if not 0.0 <= confidence <= 1.0:
            raise ValueError(f"keypoint confidence {confidence} outside [0, 1]")
        self.x = float(x)
        self.y = float(y)
        self.confidence = float(confidence)

    def __iter__(self):
        return iter((self.x, self.y, self.confidence))

    def __eq__(self, other):
        if not isinstance(other, Keypoint):
            return NotImplemented
        return (self.x, self.y, self.confidence) == (other.x, other.y, other.confidence)

    def __repr__(self):
        return f"Keypoint({self.x}, {self.y}, {self.confidence})"


@dataclass(frozen=True)
class SkeletonConfig:
    """Named keypoint layout: count, facial subset, and per-keypoint OKS constants."""

    name: str
    keypoint_count: int
    facial_indices: frozenset[int]
    oks_sigmas: tuple[float, ...]
    keypoint_names: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.oks_sigmas) != self.keypoint_count:
            raise ValueError(
                f"skeleton {self.name!r}: {len(self.oks_sigmas)} sigmas "
                f"for {self.keypoint_count} keypoints"
            )
        if any(s <= 0 for s in self.oks_sigmas):
            raise ValueError(f"skeleton {self.name!r}: sigmas must be positive")
        bad = [i for i in self.facial_indices if not 0 <= i < self.keypoint_count]
        if bad:
            raise ValueError(f"skeleton {self.name!r}: facial indices {bad} out of range")


class Pose:
    """Ordered keypoint array under a named skeleton configuration.

    Stored as a float64 array of shape (K, 3) with columns x, y, confidence.
    """

    __slots__ = ("skeleton_id", "pts")

    def __init__(self, skeleton_id: str, keypoints):
        pts = np.asarray(
            [[k.x, k.y, k.confidence] if isinstance(k, Keypoint) else k for k in keypoints],
            dtype=np.float64,
        )
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"keypoints must be (K, 3), got shape {pts.shape}")
        skeleton = get_skeleton(skeleton_id)
        if pts.shape[0] != skeleton.keypoint_count:
            raise ValueError(
                f"pose has {pts.shape[0]} keypoints, skeleton {skeleton_id!r} "
                f"declares {skeleton.keypoint_count}"
            )
        conf = pts[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("keypoint confidences outside [0, 1]")
        self.skeleton_id = skeleton_id
        self.pts = pts

    def __len__(self) -> int:
        return self.pts.shape[0]

    def __getitem__(self, i: int) -> Keypoint:
        x, y, c = self.pts[i]
        return Keypoint(x, y, c)

    @property
    def xy(self) -> np.ndarray:
        return self.pts[:, :2]

    @property
    def confidences(self) -> np.ndarray:
        return self.pts[:, 2]

    def score(self, t_c: float) -> float:
        """Mean confidence over keypoints at or above t_c; 0.0 if none qualify."""
        conf = self.confidences
        sel = conf >= t_c
        if not np.any(sel):
            return 0.0
        return float(conf[sel].mean())

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return self.skeleton_id == other.skeleton_id and np.array_equal(self.pts, other.pts)

    def __repr__(self):
        return f"Pose({self.skeleton_id!r}, {len(self)} keypoints)"


# Per-keypoint OKS constants published with the 17-keypoint COCO layout:
# nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
COCO17_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035,
    0.079, 0.079, 0.072, 0.072, 0.062, 0.062,
    0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

COCO17_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# Extra keypoints of the merged 22-point layout (torso/head points present in
# the other common training sets but absent from the 17-point one). The extra
# sigmas default to the hip/shoulder class (0.079); override per skeleton if
# better constants are available.
MERGED22_EXTRA_NAMES = ("head_top", "neck", "pelvis", "thorax", "upper_neck")

_SKELETONS: dict[str, SkeletonConfig] = {}


def register_skeleton(config: SkeletonConfig) -> SkeletonConfig:
    """Add or replace a skeleton configuration in the registry."""
    _SKELETONS[config.name] = config
    return config


def get_skeleton(name: str) -> SkeletonConfig:
    try:
        return _SKELETONS[name]
    except KeyError:
        raise KeyError(
            f"unknown skeleton {name!r}; registered: {sorted(_SKELETONS)}"
        ) from None


register_skeleton(
    SkeletonConfig(
        name="coco17",
        keypoint_count=17,
        facial_indices=frozenset({0, 1, 2}),  # nose and eyes; ears excluded
        oks_sigmas=COCO17_SIGMAS,
        keypoint_names=COCO17_NAMES,
    )
)

register_skeleton(
    SkeletonConfig(
        name="merged22",
        keypoint_count=22,
        facial_indices=frozenset({0, 1, 2}),
        oks_sigmas=COCO17_SIGMAS + (0.079,) * 5,
        keypoint_names=COCO17_NAMES + MERGED22_EXTRA_NAMES,
    )
)


class BinaryMask:
    """Bitmap of one instance's pixels, interchangeable with COCO-style RLE.

    The dense form is a (height, width) bool array; the RLE form is
    column-major with the first run counting zeros, available as an integer
    list or as the compressed ASCII string used by COCO result files.
    """

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"mask dimensions must be positive, got {bits.shape}")
        self.bits = np.ascontiguousarray(bits.astype(bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    def to_rle(self, compressed: bool = False) -> dict:
        """COCO-style RLE dict: {"size": [h, w], "counts": list[int] | str}."""
        counts = rle_encode(self.bits)
        if compressed:
            return {"size": [self.height, self.width], "counts": rle_counts_to_string(counts)}
        return {"size": [self.height, self.width], "counts": counts}

    @classmethod
    def from_rle(cls, rle: dict) -> "BinaryMask":
        size = rle.get("size")
        if not isinstance(size, (list, tuple)) or len(size) != 2:
            raise ValueError(f"RLE size must be [height, width], got {size!r}")
        h, w = int(size[0]), int(size[1])
        counts = rle.get("counts")
        if isinstance(counts, str):
            counts = rle_string_to_counts(counts)
        return cls(rle_decode(counts, h, w))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area})"


def rle_encode(bits: np.ndarray) -> list[int]:
    """Encode a (h, w) bitmap as column-major run lengths, first run zeros."""
    flat = np.asarray(bits, dtype=bool).ravel(order="F")
    n = flat.size
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [n]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Inverse of rle_encode. Raises if the runs do not cover height*width."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("negative run length")
    total = sum(counts)
    if total != height * width:
        raise ValueError(
            f"run lengths sum to {total}, expected {height}x{width}={height * width}"
        )
    values = np.arange(len(counts), dtype=np.uint8) % 2
    flat = np.repeat(values, counts).astype(bool)
    return flat.reshape((height, width), order="F")


def rle_counts_to_string(counts: Sequence[int]) -> str:
    """Pack run lengths into the compressed ASCII form used by COCO.

    Five payload bits per character (offset by 48), sign-extended, with runs
    after the second stored as deltas against the run two places back.
    """
    chars: list[str] = []
    counts = [int(c) for c in counts]
    for i, c in enumerate(counts):
        x = c if i <= 2 else c - counts[i - 2]
        more = True
        while more:
            chunk = x & 0x1F
            x >>= 5
            more = (x != -1) if (chunk & 0x10) else (x != 0)
            if more:
                chunk |= 0x20
            chars.append(chr(chunk + 48))
    return "".join(chars)


def rle_string_to_counts(s: str) -> list[int]:
    """Inverse of rle_counts_to_string."""
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise ValueError("truncated compressed RLE string")
            c = ord(s[p]) - 48
            if not 0 <= c < 64:
                raise ValueError(f"invalid character {s[p]!r} in compressed RLE")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        if x < 0:
            raise ValueError("negative run length in compressed RLE")
        counts.append(x)
    return counts


def bbox_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when the union is empty."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Set IoU of two equal-size masks; 0.0 when both are empty."""
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 0.0
    return inter / union


def mask_union(
    masks: Sequence[BinaryMask], width: int | None = None, height: int | None = None
) -> BinaryMask:
    """Set-bit union of masks; an empty list needs explicit dimensions."""
    if not masks:
        if width is None or height is None:
            raise ValueError("empty mask list requires explicit width and height")
        return BinaryMask.zeros(width, height)
    shape = masks[0].shape
    if width is not None and height is not None and shape != (height, width):
        raise ValueError(f"mask dimensions {shape} differ from ({height}, {width})")
    acc = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.shape != shape:
            raise ValueError(f"mask dimensions differ: {m.shape} vs {shape}")
        acc |= m.bits
    return BinaryMask(acc)


def tight_bbox(mask: BinaryMask, score: float = 1.0) -> BBox | None:
    """Tightest box around set pixels (pixel-count extents); None if empty."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        return None
    return BBox(
        float(xs.min()),
        float(ys.min()),
        float(xs.max() - xs.min() + 1),
        float(ys.max() - ys.min() + 1),
        score,
    )


def oks(
    gt: Pose,
    pred: Pose,
    *,
    area: float,
    skeleton: SkeletonConfig | None = None,
    visibility: Sequence[int] | None = None,
) -> float:
    """Object keypoint similarity between a ground-truth pose and a prediction.

    Mean over annotated keypoints of exp(-d^2 / (2 * area * (2 * sigma_i)^2)),
    the standard COCO form where the published per-keypoint sigmas are halves
    of the effective constants. ``visibility`` marks annotated keypoints
    (entries > 0); when omitted, keypoints with positive ground-truth
    confidence count as annotated.

    Raises OksUndefined when no keypoint is annotated or area is not positive.
    """
    if skeleton is None:
        skeleton = get_skeleton(gt.skeleton_id)
    if gt.skeleton_id != pred.skeleton_id:
        raise ValueError(
            f"skeleton mismatch: gt {gt.skeleton_id!r} vs pred {pred.skeleton_id!r}"
        )
    if len(gt) != skeleton.keypoint_count:
        raise ValueError("pose length does not match skeleton")
    if visibility is None:
        annotated = [i for i in range(len(gt)) if gt.pts[i, 2] > 0]
    else:
        if len(visibility) != len(gt):
            raise ValueError("visibility length does not match keypoint count")
        annotated = [i for i, v in enumerate(visibility) if v > 0]
    if not annotated:
        raise OksUndefined("no annotated keypoint in ground truth")
    if area <= 0:
        raise OksUndefined(f"non-positive reference area {area}")
    total = 0.0
    for i in annotated:
        dx = pred.pts[i, 0] - gt.pts[i, 0]
        dy = pred.pts[i, 1] - gt.pts[i, 1]
        k = 2.0 * skeleton.oks_sigmas[i]
        e = (dx * dx + dy * dy) / (2.0 * area * k * k)
        total += float(np.exp(-e))
    return total / len(annotated)
