"""Run one synthetic endpoint as a wire-protocol subprocess.

Usage::

    python -m poseloop.backends.synthetic_server scene.json --kind detector
"""

from __future__ import annotations

import argparse

from .protocol import serve
from .synthetic import DEFAULT_V_DET, SyntheticHandler, load_scene


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Serve synthetic-scene model rules over stdio."
    )
    parser.add_argument("scene", help="synthetic scene JSON file")
    parser.add_argument(
        "--kind",
        required=True,
        choices=("detector", "pose", "segmenter"),
        help="which endpoint to expose",
    )
    parser.add_argument(
        "--v-det",
        type=float,
        default=DEFAULT_V_DET,
        help="visibility ratio below which the detector misses an instance",
    )
    args = parser.parse_args(argv)
    handler = SyntheticHandler(load_scene(args.scene), args.kind, args.v_det)
    serve(handler)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
