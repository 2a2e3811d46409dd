"""Server side of the length-delimited JSON wire protocol.

Independent of the engine package on purpose: adapters are replaceable
reference processes and depend only on the protocol document
(docs/wire_protocol.md in the engine repository).
"""

from __future__ import annotations

import base64
import io
import json
import sys

import numpy as np
from PIL import Image

PROTOCOL_VERSION = 1


class OpError(Exception):
    """Turns into a structured {ok: false, error: {...}} reply."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def read_frame(stream) -> dict | None:
    header = stream.readline()
    if header == b"":
        return None
    length = int(header.strip())
    body = b""
    while len(body) < length:
        chunk = stream.read(length - len(body))
        if not chunk:
            raise IOError("stream closed mid-frame")
        body += chunk
    return json.loads(body.decode("utf-8"))


def write_frame(stream, obj: dict) -> None:
    body = json.dumps(obj, sort_keys=True).encode("utf-8")
    stream.write(f"{len(body)}\n".encode("ascii"))
    stream.write(body)
    stream.flush()


def decode_image(payload: dict) -> np.ndarray:
    """Image payload -> (h, w, 3) uint8 RGB array."""
    try:
        data = base64.b64decode(payload["png_base64"].encode("ascii"))
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise OpError("bad_image", f"undecodable image payload: {exc}") from None


def mask_to_rle(bits: np.ndarray) -> dict:
    """(h, w) bool array -> compressed COCO RLE (column-major, zeros first)."""
    flat = np.asarray(bits, dtype=bool).ravel(order="F")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    chars = []
    for i, c in enumerate(counts):
        x = int(c) - (int(counts[i - 2]) if i > 2 else 0)
        more = True
        while more:
            chunk = x & 0x1F
            x >>= 5
            more = (x != -1) if (chunk & 0x10) else (x != 0)
            if more:
                chunk |= 0x20
            chars.append(chr(chunk + 48))
    return {"size": [int(bits.shape[0]), int(bits.shape[1])], "counts": "".join(chars)}


class Adapter:
    """Base class: handshake plumbing, dispatch, and the serve loop."""

    kind = "unknown"
    skeletons: tuple[str, ...] = ("coco17",)
    emits_masks = False

    def prepare(self) -> None:
        """Load models; called at handshake time so load failures become
        structured handshake errors."""

    def handle(self, op: str, payload: dict) -> dict:
        method = getattr(self, f"op_{op}", None)
        if method is None:
            raise OpError("unknown_op", f"{self.kind} adapter has no op {op!r}")
        return method(payload)

    def serve(self, stdin=None, stdout=None) -> None:
        stdin = stdin if stdin is not None else sys.stdin.buffer
        stdout = stdout if stdout is not None else sys.stdout.buffer
        prepared = False
        while True:
            try:
                request = read_frame(stdin)
            except (ValueError, IOError) as exc:
                write_frame(stdout, {
                    "id": None, "ok": False,
                    "error": {"code": "bad_frame", "message": str(exc)},
                })
                return
            if request is None:
                return
            req_id = request.get("id")
            op = request.get("op")
            try:
                if op == "handshake":
                    version = request.get("protocol_version")
                    if version != PROTOCOL_VERSION:
                        raise OpError(
                            "bad_version",
                            f"peer speaks {version!r}, adapter speaks {PROTOCOL_VERSION}",
                        )
                    if not prepared:
                        try:
                            self.prepare()
                        except OpError:
                            raise
                        except Exception as exc:
                            raise OpError(
                                "load_failure", f"{type(exc).__name__}: {exc}"
                            ) from None
                        prepared = True
                    reply = {
                        "id": req_id,
                        "ok": True,
                        "protocol_version": PROTOCOL_VERSION,
                        "kind": self.kind,
                        "skeletons": list(self.skeletons),
                        "emits_masks": self.emits_masks,
                    }
                elif isinstance(op, str):
                    payload = {k: v for k, v in request.items() if k not in ("id", "op")}
                    reply = {"id": req_id, "ok": True, **self.handle(op, payload)}
                else:
                    raise OpError("bad_request", "missing or non-string 'op'")
            except OpError as exc:
                reply = {
                    "id": req_id, "ok": False,
                    "error": {"code": exc.code, "message": exc.message},
                }
            except Exception as exc:
                reply = {
                    "id": req_id, "ok": False,
                    "error": {"code": "internal", "message": f"{type(exc).__name__}: {exc}"},
                }
            write_frame(stdout, reply)
