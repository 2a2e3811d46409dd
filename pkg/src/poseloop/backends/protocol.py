"""Length-delimited JSON wire protocol to external model processes.

Frame layout, both directions: the payload byte length in ASCII decimal
followed by a single newline, then exactly that many bytes of UTF-8 JSON.
Requests are ``{"id": int, "op": str, ...}``; replies either
``{"id": int, "ok": true, ...}`` or
``{"id": int, "ok": false, "error": {"code": str, "message": str}}``.
See docs/wire_protocol.md for the per-op fields.
"""

from __future__ import annotations

import json
import select
import shlex
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

from ..geometry import BBox, BinaryMask, Pose, get_skeleton
from ..imaging import CropTransform, decode_png_base64, encode_png_base64
from ..prompting import PromptSet

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolError",
    "BackendRefused",
    "BackendOpError",
    "Detection",
    "HandshakeInfo",
    "read_frame",
    "write_frame",
    "ProcessBackend",
    "serve",
]

PROTOCOL_VERSION = 1

KINDS = ("detector", "pose", "segmenter")


class ProtocolError(RuntimeError):
    """Transport failure: malformed frame, bad reply, timeout, or dead peer."""


class BackendRefused(RuntimeError):
    """The peer answered with a structured error reply (ok: false).

    Unlike ProtocolError this leaves the connection usable, so callers may
    treat it as a per-request failure.
    """

    def __init__(self, op: str, code: str, message: str):
        super().__init__(f"backend refused {op!r}: [{code}] {message}")
        self.op = op
        self.code = code
        self.message = message


class BackendOpError(Exception):
    """Raised by server handlers to produce a structured error reply."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Detection:
    """One detector hypothesis: box, score, and an optional instance mask."""

    bbox: BBox
    score: float
    mask: BinaryMask | None = None


@dataclass(frozen=True)
class HandshakeInfo:
    protocol_version: int
    kind: str
    skeletons: tuple[str, ...]
    emits_masks: bool


def write_frame(stream, obj: dict) -> None:
    body = json.dumps(obj, sort_keys=True).encode("utf-8")
    stream.write(f"{len(body)}\n".encode("ascii"))
    stream.write(body)
    stream.flush()


def read_frame(stream) -> dict | None:
    """Read one frame; None on clean EOF. Raises ProtocolError on garbage."""
    header = stream.readline()
    if header == b"":
        return None
    try:
        length = int(header.strip())
    except ValueError:
        raise ProtocolError(f"bad frame header {header!r}") from None
    if length < 0 or length > 512 * 1024 * 1024:
        raise ProtocolError(f"unreasonable frame length {length}")
    body = b""
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise ProtocolError("stream closed mid-frame")
        body += chunk
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError(f"frame must be a JSON object, got {type(obj).__name__}")
    return obj


def _image_payload(image: np.ndarray) -> dict:
    return {
        "width": int(image.shape[1]),
        "height": int(image.shape[0]),
        "png_base64": encode_png_base64(image),
    }


def image_from_payload(payload: dict) -> np.ndarray:
    try:
        image = decode_png_base64(payload["png_base64"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendOpError("bad_image", f"undecodable image payload: {exc}") from None
    w, h = payload.get("width"), payload.get("height")
    if w is not None and (image.shape[1] != w or image.shape[0] != h):
        raise BackendOpError(
            "bad_image",
            f"payload declares {w}x{h} but PNG decodes to "
            f"{image.shape[1]}x{image.shape[0]}",
        )
    return image


class ProcessBackend:
    """Client for one external backend process, one request in flight.

    The command is spawned on creation; ``handshake()`` must succeed before
    the op methods are used. All images travel inline as base64 PNG.
    """

    def __init__(self, command: str | list[str], timeout: float = 60.0):
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = command
        self.timeout = timeout
        self._next_id = 0
        self.info: HandshakeInfo | None = None
        try:
            self._proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=sys.stderr.buffer if hasattr(sys.stderr, "buffer") else None,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot spawn backend {command!r}: {exc}") from None

    def _request(self, op: str, payload: dict) -> dict:
        if self._proc.poll() is not None:
            raise ProtocolError(
                f"backend {self.command!r} exited with code {self._proc.returncode}"
            )
        self._next_id += 1
        req_id = self._next_id
        message = {"id": req_id, "op": op, **payload}
        try:
            write_frame(self._proc.stdin, message)
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"backend pipe broken: {exc}") from None
        ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout)
        if not ready:
            raise ProtocolError(f"backend timed out after {self.timeout}s on op {op!r}")
        reply = read_frame(self._proc.stdout)
        if reply is None:
            raise ProtocolError(f"backend closed the stream during op {op!r}")
        if reply.get("id") != req_id:
            raise ProtocolError(
                f"reply id {reply.get('id')!r} does not match request id {req_id}"
            )
        if "ok" not in reply:
            raise ProtocolError(f"reply missing 'ok' field: {reply}")
        if not reply["ok"]:
            err = reply.get("error") or {}
            raise BackendRefused(
                op, str(err.get("code", "unknown")), str(err.get("message", ""))
            )
        return reply

    def handshake(self) -> HandshakeInfo:
        reply = self._request("handshake", {"protocol_version": PROTOCOL_VERSION})
        try:
            info = HandshakeInfo(
                protocol_version=int(reply["protocol_version"]),
                kind=str(reply["kind"]),
                skeletons=tuple(reply["skeletons"]),
                emits_masks=bool(reply.get("emits_masks", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed handshake reply: {exc}") from None
        if info.protocol_version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: peer {info.protocol_version}, "
                f"local {PROTOCOL_VERSION}"
            )
        self.info = info
        return info

    def detect(self, image: np.ndarray) -> list[Detection]:
        reply = self._request("detect", {"image": _image_payload(image)})
        detections = []
        try:
            for det in reply["detections"]:
                x, y, w, h = det["bbox"]
                mask = det.get("mask")
                detections.append(
                    Detection(
                        bbox=BBox(float(x), float(y), float(w), float(h)),
                        score=float(det["score"]),
                        mask=BinaryMask.from_rle(mask) if mask is not None else None,
                    )
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed detect reply: {exc}") from None
        return detections

    def pose(
        self, crop: np.ndarray, transform: CropTransform, skeleton_id: str
    ) -> Pose:
        """Keypoints for the crop, mapped back to full-image coordinates."""
        reply = self._request(
            "pose",
            {
                "image": _image_payload(crop),
                "transform": transform.to_json(),
                "skeleton": skeleton_id,
            },
        )
        skeleton = get_skeleton(skeleton_id)
        try:
            pts = np.asarray(reply["keypoints"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed pose reply: {exc}") from None
        if pts.shape != (skeleton.keypoint_count, 3):
            raise ProtocolError(
                f"pose reply has shape {pts.shape}, expected "
                f"({skeleton.keypoint_count}, 3)"
            )
        pts[:, 0] += transform.x_offset
        pts[:, 1] += transform.y_offset
        pts[:, 2] = np.clip(pts[:, 2], 0.0, 1.0)
        return Pose(skeleton_id, pts)

    def segment(self, image: np.ndarray, prompts: PromptSet) -> tuple[BinaryMask, float]:
        if not prompts.positives:
            raise ValueError("segment requires at least one positive prompt")
        reply = self._request(
            "segment",
            {"image": _image_payload(image), "prompts": prompts.to_json()},
        )
        try:
            mask = BinaryMask.from_rle(reply["mask"])
            score = float(reply["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed segment reply: {exc}") from None
        if mask.shape != image.shape[:2]:
            raise ProtocolError(
                f"segment mask {mask.shape} does not match image {image.shape[:2]}"
            )
        return mask, score

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(handler, stdin=None, stdout=None) -> None:
    """Answer framed requests until EOF; the adapter-side main loop.

    ``handler`` provides ``handshake(payload) -> dict`` and
    ``handle(op, payload) -> dict``; raising BackendOpError produces a
    structured error reply, any other exception an ``internal`` error.
    Every request id is answered exactly once.
    """
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    while True:
        try:
            request = read_frame(stdin)
        except ProtocolError as exc:
            write_frame(
                stdout,
                {
                    "id": None,
                    "ok": False,
                    "error": {"code": "bad_frame", "message": str(exc)},
                },
            )
            return
        if request is None:
            return
        req_id = request.get("id")
        op = request.get("op")
        payload = {k: v for k, v in request.items() if k not in ("id", "op")}
        try:
            if op == "handshake":
                result = handler.handshake(payload)
            elif isinstance(op, str):
                result = handler.handle(op, payload)
            else:
                raise BackendOpError("bad_request", "missing or non-string 'op'")
            reply = {"id": req_id, "ok": True, **result}
        except BackendOpError as exc:
            reply = {
                "id": req_id,
                "ok": False,
                "error": {"code": exc.code, "message": exc.message},
            }
        except Exception as exc:  # keep serving; misbehaving input must not kill us
            reply = {
                "id": req_id,
                "ok": False,
                "error": {"code": "internal", "message": f"{type(exc).__name__}: {exc}"},
            }
        write_frame(stdout, reply)


class BaseHandler:
    """Shared handler skeleton: handshake plumbing and op dispatch."""

    kind = "unknown"
    skeletons: tuple[str, ...] = ("coco17",)
    emits_masks = False

    def handshake(self, payload: dict) -> dict:
        version = payload.get("protocol_version")
        if version != PROTOCOL_VERSION:
            raise BackendOpError(
                "bad_version",
                f"peer protocol {version!r}, this backend speaks {PROTOCOL_VERSION}",
            )
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "skeletons": list(self.skeletons),
            "emits_masks": self.emits_masks,
        }

    def handle(self, op: str, payload: dict) -> dict:
        method = getattr(self, f"op_{op}", None)
        if method is None:
            raise BackendOpError("unknown_op", f"this backend does not implement {op!r}")
        return method(payload)
