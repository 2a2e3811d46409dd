"""Directional check on a real validation subset: two loop passes should
beat one, and one pass should beat the raw detector.

Runs the engine CLI three times over the same images with the given adapter
backends and compares detection AP:

    detector-only  <=  loop 1x  <=  loop 2x

Requires real images + COCO-format ground truth and, for meaningful
results, real checkpoints (the classical engines run but are weak). Example:

    python scripts/ochuman_directional.py \
        --images val_subset/ --gt val_subset/annotations.json --out /tmp/dir \
        --detector "poseloop-adapter detector --engine torchscript --checkpoint det.pt" \
        --pose     "poseloop-adapter pose --engine torchscript --checkpoint pose.pt" \
        --segmenter "poseloop-adapter segment --engine sam2 --checkpoint sam.pt"

Exit code 0 when the ordering holds, 1 when it does not, 2 on setup errors.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path


def run(cmd: list[str]) -> None:
    proc = subprocess.run(cmd)
    if proc.returncode != 0:
        raise RuntimeError(f"command failed ({proc.returncode}): {' '.join(cmd)}")


def bbox_ap(gt: str, results: Path) -> float:
    report = results.parent / "report.json"
    run([
        sys.executable, "-m", "poseloop.cli", "eval",
        "--gt", gt, "--results", f"run={results}",
        "--task", "bbox", "--out", str(report),
    ])
    data = json.loads(report.read_text())
    ap = data["tasks"]["run"]["bbox"]["ap"]
    return -1.0 if ap is None else float(ap)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--images", required=True)
    parser.add_argument("--gt", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--detector", required=True)
    parser.add_argument("--pose", required=True)
    parser.add_argument("--segmenter", required=True)
    parser.add_argument("--min-images", type=int, default=50)
    args = parser.parse_args()

    image_dir = Path(args.images)
    n_images = sum(
        1 for p in image_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if image_dir.is_dir() else 0
    if n_images < args.min_images:
        print(f"error: need at least {args.min_images} images, found {n_images}",
              file=sys.stderr)
        return 2

    out = Path(args.out)
    configs = {
        "detector_only": ["--iterations", "1", "--segmenter", "none"],
        "loop_1x": ["--iterations", "1", "--segmenter", args.segmenter],
        "loop_2x": ["--iterations", "2", "--segmenter", args.segmenter],
    }
    aps = {}
    for name, extra in configs.items():
        run_dir = out / name
        run([
            sys.executable, "-m", "poseloop.cli", "run",
            "--images", args.images, "--out", str(run_dir),
            "--detector", args.detector, "--pose", args.pose, *extra,
        ])
        aps[name] = bbox_ap(args.gt, run_dir / "results.json")
        print(f"{name}: bbox AP = {aps[name]:.4f}")

    ok = aps["detector_only"] <= aps["loop_1x"] <= aps["loop_2x"]
    print("ordering detector-only <= 1x <= 2x:", "HOLDS" if ok else "VIOLATED")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
