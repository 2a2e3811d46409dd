"""Command-line entry points: run the loop, evaluate results, build scenes.

Every flag has a config-file equivalent (JSON, same names with underscores);
command-line values override the file. The effective configuration is echoed
into the provenance output of each run.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import evaluation, synth
from .backends import BackendSet, ProtocolError, load_scene, render_scene
from .engine import LoopConfig, run_loop
from .imaging import load_image
from .prompting import loop_policy

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

RUN_DEFAULTS = {
    "iterations": 2,
    "alpha": 0.8,
    "tc": 0.3,
    "nmax": 6,
    "bbox_prompt": "never",
    "pmc_gate": "on",
    "det_score_min": 0.3,
    "detector": "synthetic",
    "pose": "synthetic",
    "segmenter": "synthetic",
    "v_det": 0.5,
    "workers": 1,
    "refine": False,
    "rerun_pose": False,
}


def _parse_bbox_prompt(spec: str) -> tuple[str, float]:
    if spec in ("never", "always"):
        return spec, 0.5
    m = re.fullmatch(r"by-max-iou:(\d*\.?\d+)", spec)
    if m:
        thr = float(m.group(1))
        if not 0.0 <= thr <= 1.0:
            raise ValueError(f"bbox-prompt threshold {thr} outside [0, 1]")
        return "by_max_iou", thr
    raise ValueError(
        f"bad --bbox-prompt {spec!r}; expected never, always, or by-max-iou:<t>"
    )


def _effective_run_settings(args) -> dict:
    settings = dict(RUN_DEFAULTS)
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(settings)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_cfg)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _loop_config(settings: dict) -> LoopConfig:
    mode, thr = _parse_bbox_prompt(settings["bbox_prompt"])
    prompts = replace(
        loop_policy(),
        t_c=float(settings["tc"]),
        n_max=int(settings["nmax"]),
        bbox_mode=mode,
        bbox_iou_threshold=thr,
    )
    return LoopConfig(
        max_iterations=int(settings["iterations"]),
        alpha=float(settings["alpha"]),
        det_score_min=float(settings["det_score_min"]),
        pmc_gate=settings["pmc_gate"] in ("on", True),
        refine_after_loop=bool(settings["refine"]),
        rerun_pose_after_refine=bool(settings["rerun_pose"]),
        loop_prompts=prompts,
    )


def _gather_inputs(spec: str) -> list[Path]:
    path = Path(spec)
    if path.is_dir():
        files = [
            p
            for p in sorted(path.iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES
            or (p.suffix == ".json" and p.name != "ground_truth.json")
        ]
        if not files:
            raise ValueError(f"no images or scene files under {path}")
        return files
    if path.suffix == ".txt":
        lines = [l.strip() for l in path.read_text().splitlines() if l.strip()]
        return [Path(l) for l in lines]
    if path.exists():
        return [path]
    raise ValueError(f"input {spec!r} does not exist")


def _image_id_for(path: Path, index: int) -> int:
    m = re.search(r"(\d+)$", path.stem)
    return int(m.group(1)) if m else index


def _load_input(path: Path):
    """Returns (image, scene-or-None)."""
    if path.suffix == ".json":
        scene = load_scene(path)
        return render_scene(scene), scene
    return load_image(path), None


def _backend_specs(settings: dict) -> tuple[str, str, str]:
    return (settings["detector"], settings["pose"], settings["segmenter"])


def _run_chunk(jobs, settings: dict, config: LoopConfig):
    """Process a list of (path, image_id) jobs sequentially.

    Backends bound to a per-input scene (bare "synthetic") are rebuilt for
    every image; otherwise one backend set serves the whole chunk, so
    subprocess backends load their models once.
    """
    specs = _backend_specs(settings)
    reusable = not any(spec == "synthetic" for spec in specs)
    shared = None
    outputs = []
    try:
        for path, image_id in jobs:
            image, scene = _load_input(path)
            if reusable:
                if shared is None:
                    shared = BackendSet.from_specs(
                        *specs, scene=scene, v_det=float(settings["v_det"])
                    )
                backends = shared
            else:
                backends = BackendSet.from_specs(
                    *specs, scene=scene, v_det=float(settings["v_det"])
                )
            try:
                result = run_loop(image, backends, config)
            finally:
                if backends is not shared:
                    backends.close()
            provenance = result.provenance_json(image_id)
            provenance["file_name"] = path.name
            outputs.append(
                (image_id, result.to_results_json(image_id), provenance, result.error)
            )
    finally:
        if shared is not None:
            shared.close()
    return outputs


def cmd_run(args) -> int:
    try:
        settings = _effective_run_settings(args)
        config = _loop_config(settings)
        inputs = _gather_inputs(args.images)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(p, _image_id_for(p, i)) for i, p in enumerate(inputs)]

    failures = []
    outputs = {}
    try:
        workers = max(1, int(settings["workers"]))
        if workers == 1:
            for item in _run_chunk(jobs, settings, config):
                outputs[item[0]] = item
        else:
            chunks = [jobs[i::workers] for i in range(workers)]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(_run_chunk, chunk, settings, config)
                    for chunk in chunks
                    if chunk
                ]
                for fut in futures:
                    for item in fut.result():
                        outputs[item[0]] = item
    except (ProtocolError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    results = []
    provenance = []
    for image_id in sorted(outputs):
        _, res, prov, err = outputs[image_id]
        results.extend(res)
        provenance.append(prov)
        if err:
            failures.append((image_id, err))

    with open(out_dir / "results.json", "w", encoding="utf-8") as f:
        json.dump(results, f, sort_keys=True)
        f.write("\n")
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as f:
        json.dump(
            {"settings": settings, "config": config.to_json(), "images": provenance},
            f,
            sort_keys=True,
        )
        f.write("\n")

    print(f"{len(inputs)} image(s) -> {len(results)} instance(s); wrote {out_dir}")
    if failures:
        for image_id, err in failures:
            print(f"error: image {image_id}: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    try:
        gt = evaluation.load_annotations(args.gt)
        labeled = []
        for spec in args.results:
            label, _, path = spec.rpartition("=")
            path = Path(path)
            labeled.append((label or path.stem, evaluation.load_results(path, gt.images)))
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    tasks = ("bbox", "segm", "keypoints") if args.task == "all" else (args.task,)
    report: dict = {"tasks": {}, "stratified": {}}
    for label, results in labeled:
        summaries = {}
        for task in tasks:
            summaries[task] = evaluation.average_precision(
                gt, results, task, max_dets=args.max_dets
            )
        report["tasks"][label] = {t: s.to_json() for t, s in summaries.items()}
        print(f"== {label}")
        print(evaluation.format_ap_table(summaries))
        print()

    if args.stratify_max_iou:
        stratified = {
            label: evaluation.stratified_bbox_ap(gt, results, max_dets=args.max_dets)
            for label, results in labeled
        }
        report["stratified"] = {k: v.to_json() for k, v in stratified.items()}
        print(evaluation.format_stratified_table(stratified))

    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True, indent=1)
            f.write("\n")
    return 0


def cmd_synth(args) -> int:
    try:
        if not 0.0 < args.occlusion < 1.0:
            raise ValueError(f"--occlusion {args.occlusion} outside (0, 1)")
        scenes, gt_path = synth.generate_corpus(
            args.out,
            n_scenes=args.scenes,
            seed=args.seed,
            occlusion=args.occlusion,
            occlusion_jitter=args.occlusion_jitter,
        )
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(scenes)} scene(s) and {gt_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseloop",
        description="Iterative detection, segmentation, and pose estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the loop over images or scene files")
    run.add_argument("--images", required=True,
                     help="image/scene directory, list file, or single file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--config", help="JSON config file (flag names as keys)")
    run.add_argument("--iterations", type=int, help="loop iteration cap")
    run.add_argument("--alpha", type=float, help="background dimming factor")
    run.add_argument("--tc", type=float, help="keypoint confidence threshold")
    run.add_argument("--nmax", type=int, help="max positive prompts")
    run.add_argument("--bbox-prompt", dest="bbox_prompt",
                     help="never | always | by-max-iou:<t>")
    run.add_argument("--pmc-gate", dest="pmc_gate", choices=("on", "off"),
                     help="consistency gate on refined masks")
    run.add_argument("--det-score-min", dest="det_score_min", type=float,
                     help="detection score cutoff")
    run.add_argument("--detector", help="backend command or synthetic[:scene]")
    run.add_argument("--pose", help="backend command or synthetic[:scene]")
    run.add_argument("--segmenter", help="backend command or synthetic[:scene]")
    run.add_argument("--v-det", dest="v_det", type=float,
                     help="synthetic detector visibility threshold")
    run.add_argument("--workers", type=int, help="parallel images")
    run.add_argument("--refine", action="store_const", const=True, default=None,
                     help="run the box-trusting refinement pass after the loop")
    run.add_argument("--rerun-pose", dest="rerun_pose", action="store_const",
                     const=True, default=None,
                     help="re-estimate pose after an adopted mask refinement")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score results against ground truth")
    ev.add_argument("--gt", required=True, help="COCO-format annotation file")
    ev.add_argument("--results", required=True, nargs="+",
                    help="results file(s), optionally label=path")
    ev.add_argument("--task", default="all",
                    choices=("all", "bbox", "segm", "keypoints"))
    ev.add_argument("--stratify-max-iou", dest="stratify_max_iou",
                    action="store_true",
                    help="also report per-bin detection AP by GT overlap")
    ev.add_argument("--max-dets", dest="max_dets", type=int, default=100)
    ev.add_argument("--out", help="write a JSON metrics report here")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="generate synthetic scenes plus ground truth")
    sy.add_argument("--out", required=True, help="output directory")
    sy.add_argument("--scenes", type=int, default=100)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--occlusion", type=float, default=0.65,
                    help="target pair occlusion fraction")
    sy.add_argument("--occlusion-jitter", dest="occlusion_jitter", type=float,
                    default=0.04, help="seeded spread around the target")
    sy.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
