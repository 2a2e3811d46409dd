"""Backend-contract checks runnable against any wire-protocol process.

Verifies the transport rules (ids echoed exactly once, structured errors for
unknown or malformed requests, survivable refusals) and the per-kind op
contracts. Usable as a library (``run_conformance``) or from the command
line::

    python -m poseloop.backends.conformance --kind detector -- CMD ARGS...
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

from ..imaging import CropTransform
from ..prompting import PromptSet
from .protocol import (
    PROTOCOL_VERSION,
    BackendRefused,
    ProcessBackend,
    ProtocolError,
    read_frame,
    write_frame,
)

__all__ = ["CheckResult", "run_conformance", "main"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def __str__(self):
        mark = "ok " if self.ok else "FAIL"
        suffix = f" ({self.detail})" if self.detail else ""
        return f"[{mark}] {self.name}{suffix}"


def _raw_checks(command: list[str], timeout: float) -> list[CheckResult]:
    """Frame-level checks that need direct access to the streams."""
    results = []
    proc = subprocess.Popen(
        command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
    )
    try:
        ids = [5, 2, 19, 3]
        for i in ids:
            write_frame(proc.stdin, {"id": i, "op": "handshake",
                                     "protocol_version": PROTOCOL_VERSION})
        got = []
        for _ in ids:
            reply = read_frame(proc.stdout)
            if reply is None:
                break
            got.append(reply.get("id"))
        results.append(
            CheckResult(
                "ids_echoed_exactly_once",
                got == ids,
                f"sent {ids}, received {got}" if got != ids else "",
            )
        )

        write_frame(proc.stdin, {"id": 77, "op": "defenestrate"})
        reply = read_frame(proc.stdout)
        ok = (
            reply is not None
            and reply.get("id") == 77
            and reply.get("ok") is False
            and isinstance(reply.get("error"), dict)
            and reply["error"].get("code") == "unknown_op"
        )
        results.append(
            CheckResult("unknown_op_rejected", ok, "" if ok else f"reply {reply}")
        )

        # malformed detect (no image) must produce a structured error, not death
        write_frame(proc.stdin, {"id": 78, "op": "detect"})
        reply = read_frame(proc.stdout)
        ok = reply is not None and reply.get("id") == 78 and "ok" in reply
        results.append(
            CheckResult(
                "malformed_request_survivable", ok, "" if ok else f"reply {reply}"
            )
        )

        write_frame(proc.stdin, {"id": 79, "op": "handshake",
                                 "protocol_version": PROTOCOL_VERSION})
        reply = read_frame(proc.stdout)
        ok = reply is not None and reply.get("id") == 79 and reply.get("ok") is True
        results.append(
            CheckResult("alive_after_errors", ok, "" if ok else f"reply {reply}")
        )
    except (ProtocolError, BrokenPipeError, OSError) as exc:
        results.append(CheckResult("transport", False, str(exc)))
    finally:
        try:
            proc.stdin.close()
        except OSError:
            pass
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    return results


def run_conformance(
    command: list[str] | str,
    kind: str,
    width: int = 64,
    height: int = 48,
    timeout: float = 60.0,
) -> list[CheckResult]:
    """Run every applicable check against a backend command; returns results.

    ``width``/``height`` size the probe images (synthetic backends require
    their scene's dimensions).
    """
    if kind not in ("detector", "pose", "segmenter"):
        raise ValueError(f"unknown backend kind {kind!r}")
    if isinstance(command, str):
        import shlex

        command = shlex.split(command)
    results: list[CheckResult] = []

    try:
        backend = ProcessBackend(command, timeout=timeout)
    except ProtocolError as exc:
        return [CheckResult("spawn", False, str(exc))]
    with backend:
        try:
            info = backend.handshake()
            ok = (
                info.protocol_version == PROTOCOL_VERSION
                and info.kind == kind
                and len(info.skeletons) > 0
            )
            detail = "" if ok else f"got {info}"
            results.append(CheckResult("handshake", ok, detail))
        except (ProtocolError, BackendRefused) as exc:
            results.append(CheckResult("handshake", False, str(exc)))
            return results

        black = np.zeros((height, width, 3), dtype=np.uint8)
        gray = np.full((height, width, 3), 128, dtype=np.uint8)
        try:
            if kind == "detector":
                detections = backend.detect(black)
                results.append(
                    CheckResult(
                        "detect_black_image_empty",
                        detections == [],
                        "" if detections == [] else f"{len(detections)} detections",
                    )
                )
                if info.emits_masks and detections:
                    ok = all(
                        d.mask is None or d.mask.shape == (height, width)
                        for d in detections
                    )
                    results.append(CheckResult("detect_mask_dimensions", ok))
            elif kind == "pose":
                skeleton = info.skeletons[0]
                pose = backend.pose(gray, CropTransform(0, 0), skeleton)
                conf_ok = bool(
                    np.all(pose.confidences >= 0.0) and np.all(pose.confidences <= 1.0)
                )
                results.append(
                    CheckResult("pose_reply_shape_and_confidence", conf_ok)
                )
            else:
                prompts = PromptSet(positives=((width / 2.0, height / 2.0),))
                mask, score = backend.segment(gray, prompts)
                ok = mask.shape == (height, width) and 0.0 <= score <= 1.0
                results.append(CheckResult("segment_reply_mask_and_score", ok))
        except (ProtocolError, BackendRefused) as exc:
            results.append(CheckResult(f"{kind}_op", False, str(exc)))

    results.extend(_raw_checks(command, timeout))
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Check a backend process against the wire-protocol contract."
    )
    parser.add_argument("--kind", required=True,
                        choices=("detector", "pose", "segmenter"))
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--height", type=int, default=48)
    parser.add_argument("--timeout", type=float, default=60.0)
    parser.add_argument("command", nargs=argparse.REMAINDER,
                        help="backend command line (prefix with --)")
    args = parser.parse_args(argv)
    command = [c for c in args.command if c != "--"]
    if not command:
        parser.error("no backend command given")
    results = run_conformance(
        command, args.kind, width=args.width, height=args.height, timeout=args.timeout
    )
    for r in results:
        print(r)
    return 0 if all(r.ok for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
