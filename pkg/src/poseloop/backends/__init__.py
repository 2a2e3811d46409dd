"""Backend abstraction: wire-protocol clients and the synthetic stand-in.

A backend set bundles the three endpoints the loop needs. Each endpoint is
either an external process speaking the length-delimited JSON protocol
(``ProcessBackend``) or an in-process synthetic rule set bound to a scene.
Endpoint specs, as used by the command line:

* ``synthetic`` — synthetic rules on the scene backing the current input
* ``synthetic:path/to/scene.json`` — synthetic rules on a pinned scene
* ``none`` — segmenter only: refuse every call, so instances keep their
  detector masks (the "no mask refinement" ablation)
* anything else — a command line to spawn as a subprocess
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .protocol import (
    PROTOCOL_VERSION,
    BackendOpError,
    BackendRefused,
    Detection,
    HandshakeInfo,
    ProcessBackend,
    ProtocolError,
    read_frame,
    serve,
    write_frame,
)
from .synthetic import (
    DEFAULT_V_DET,
    SyntheticDetector,
    SyntheticPoseEstimator,
    SyntheticScene,
    SyntheticSegmenter,
    load_scene,
    render_scene,
    save_scene,
)

__all__ = [
    "PROTOCOL_VERSION",
    "BackendOpError",
    "BackendRefused",
    "BackendSet",
    "Detection",
    "HandshakeInfo",
    "ProcessBackend",
    "ProtocolError",
    "SyntheticScene",
    "load_scene",
    "save_scene",
    "render_scene",
    "read_frame",
    "write_frame",
    "serve",
]


class NullSegmenter:
    """Refuses every segmentation call: the loop keeps detector masks."""

    def handshake(self) -> HandshakeInfo:
        return HandshakeInfo(PROTOCOL_VERSION, "segmenter", ("coco17",), False)

    def segment(self, image, prompts):
        raise BackendRefused("segment", "disabled", "mask refinement is turned off")

    def close(self) -> None:
        pass


@dataclass
class BackendSet:
    """The three endpoints of one loop run; handshake before first use."""

    detector: object
    pose_estimator: object
    segmenter: object
    _info: dict[str, HandshakeInfo] = field(default_factory=dict)

    def handshake_all(self) -> dict[str, HandshakeInfo]:
        if not self._info:
            self._info = {
                "detector": self.detector.handshake(),
                "pose": self.pose_estimator.handshake(),
                "segmenter": self.segmenter.handshake(),
            }
        return self._info

    def close(self) -> None:
        for endpoint in (self.detector, self.pose_estimator, self.segmenter):
            close = getattr(endpoint, "close", None)
            if close is not None:
                close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @classmethod
    def synthetic(cls, scene: SyntheticScene, v_det: float = DEFAULT_V_DET) -> "BackendSet":
        return cls(
            detector=SyntheticDetector(scene, v_det),
            pose_estimator=SyntheticPoseEstimator(scene, v_det),
            segmenter=SyntheticSegmenter(scene, v_det),
        )

    @classmethod
    def from_specs(
        cls,
        detector_spec: str,
        pose_spec: str,
        segmenter_spec: str,
        scene: SyntheticScene | None = None,
        v_det: float = DEFAULT_V_DET,
        timeout: float = 60.0,
    ) -> "BackendSet":
        """Build a set from endpoint specs (see module docstring)."""

        def build(spec: str, kind: str):
            if spec == "none":
                if kind != "segmenter":
                    raise ValueError(f"'none' is only valid for the segmenter, not {kind}")
                return NullSegmenter()
            if spec == "synthetic" or spec.startswith("synthetic:"):
                bound = scene
                if spec.startswith("synthetic:"):
                    bound = load_scene(spec.split(":", 1)[1])
                if bound is None:
                    raise ValueError(
                        f"{kind} spec {spec!r} needs a scene (input is not a "
                        "scene file and no scene path was given)"
                    )
                if kind == "detector":
                    return SyntheticDetector(bound, v_det)
                if kind == "pose":
                    return SyntheticPoseEstimator(bound, v_det)
                return SyntheticSegmenter(bound, v_det)
            return ProcessBackend(spec, timeout=timeout)

        return cls(
            detector=build(detector_spec, "detector"),
            pose_estimator=build(pose_spec, "pose"),
            segmenter=build(segmenter_spec, "segmenter"),
        )
