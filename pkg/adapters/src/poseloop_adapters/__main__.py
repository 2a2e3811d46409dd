"""Long-running backend processes speaking the poseloop wire protocol.

Usage::

    poseloop-adapter detector --engine contour
    poseloop-adapter detector --engine torchscript --checkpoint model.pt
    poseloop-adapter pose --engine prior
    poseloop-adapter pose --engine torchscript --checkpoint pose.pt --skeleton coco17
    poseloop-adapter segment --engine grabcut
    poseloop-adapter segment --engine sam2 --checkpoint sam.pt --model-config cfg.yaml

Model loading happens at handshake time, so a missing or broken checkpoint
answers the handshake with a structured error instead of dying silently.
"""

from __future__ import annotations

import argparse

from . import detector, pose, segmenter


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="poseloop-adapter", description=__doc__)
    sub = parser.add_subparsers(dest="kind", required=True)

    det = sub.add_parser("detector", help="serve a person detector")
    det.add_argument("--engine", default="contour", choices=("contour", "torchscript"))
    det.add_argument("--checkpoint", help="TorchScript file for --engine torchscript")

    pos = sub.add_parser("pose", help="serve a top-down pose estimator")
    pos.add_argument("--engine", default="prior", choices=("prior", "torchscript"))
    pos.add_argument("--checkpoint")
    pos.add_argument("--skeleton", default="coco17")

    seg = sub.add_parser("segment", help="serve a promptable segmenter")
    seg.add_argument("--engine", default="grabcut", choices=("grabcut", "sam2"))
    seg.add_argument("--checkpoint")
    seg.add_argument("--model-config", dest="model_config")
    seg.add_argument("--max-hole-area", dest="max_hole_area", type=int, default=10)
    seg.add_argument("--max-sprinkle-area", dest="max_sprinkle_area", type=int,
                     default=50)

    args = parser.parse_args(argv)
    if args.kind == "detector":
        adapter = detector.build(args.engine, args.checkpoint)
    elif args.kind == "pose":
        adapter = pose.build(args.engine, args.checkpoint, args.skeleton)
    else:
        adapter = segmenter.build(
            args.engine, args.checkpoint, args.model_config,
            args.max_hole_area, args.max_sprinkle_area,
        )
    adapter.serve()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
