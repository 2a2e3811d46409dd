import json

import pytest

from poseloop.backends import save_scene
from poseloop.cli import main
from poseloop.evaluation import load_annotations
from poseloop.synth import canonical_occlusion_scene


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--scenes", "6", "--seed", "3"]) == 0
    return out


class TestSynthCommand:
    def test_deterministic_output(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "--out", str(out), "--scenes", "4", "--seed", "7"]) == 0
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_occlusion_within_one_percent(self, tmp_path):
        import numpy as np

        from poseloop.backends import load_scene

        out = tmp_path / "occ"
        assert main(
            ["synth", "--out", str(out), "--scenes", "5", "--seed", "1",
             "--occlusion", "0.7", "--occlusion-jitter", "0"]
        ) == 0
        pair_scenes = 0
        for p in sorted(out.glob("scene_*.json")):
            scene = load_scene(p)
            if len(scene.instances) != 2:
                continue
            front, back = scene.instances
            if not (front.mask.bits & back.mask.bits).any():
                continue
            pair_scenes += 1
            cov = np.count_nonzero(front.mask.bits & back.mask.bits) / back.mask.area
            assert abs(cov - 0.7) < 0.01
        assert pair_scenes >= 2

    def test_ground_truth_round_trips(self, corpus):
        ds = load_annotations(corpus / "ground_truth.json")
        scene_files = sorted(corpus.glob("scene_*.json"))
        assert len(ds.images) == len(scene_files)
        assert len(ds.instances) > len(scene_files)  # pairs exist

    def test_bad_params_rejected(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--occlusion", "1.5"]) == 2


class TestRunCommand:
    def test_iteration_count_changes_instances(self, corpus, tmp_path):
        out1 = tmp_path / "once"
        out2 = tmp_path / "twice"
        for out, iters in ((out1, "1"), (out2, "2")):
            code = main(
                ["run", "--images", str(corpus), "--out", str(out),
                 "--iterations", iters]
            )
            assert code == 0
        r1 = json.loads((out1 / "results.json").read_text())
        r2 = json.loads((out2 / "results.json").read_text())
        assert len(r2) > len(r1)

    def test_provenance_echoes_effective_config(self, corpus, tmp_path):
        out = tmp_path / "echo"
        assert main(
            ["run", "--images", str(corpus), "--out", str(out),
             "--alpha", "0.5", "--tc", "0.4"]
        ) == 0
        prov = json.loads((out / "provenance.json").read_text())
        assert prov["settings"]["alpha"] == 0.5
        assert prov["config"]["alpha"] == 0.5
        assert prov["config"]["loop_prompts"]["t_c"] == 0.4
        assert len(prov["images"]) == len(list(corpus.glob("scene_*.json")))

    def test_config_file_and_cli_precedence(self, corpus, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"alpha": 0.3, "iterations": 1}))
        out = tmp_path / "prec"
        assert main(
            ["run", "--images", str(corpus), "--out", str(out),
             "--config", str(cfg), "--alpha", "0.6"]
        ) == 0
        prov = json.loads((out / "provenance.json").read_text())
        assert prov["config"]["alpha"] == 0.6  # CLI wins
        assert prov["config"]["max_iterations"] == 1  # file applies

    def test_missing_backend_clean_error(self, corpus, tmp_path):
        code = main(
            ["run", "--images", str(corpus), "--out", str(tmp_path / "x"),
             "--detector", "/no/such/backend --serve"]
        )
        assert code != 0

    def test_unknown_config_key_rejected(self, corpus, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"alhpa": 0.3}))
        assert main(
            ["run", "--images", str(corpus), "--out", str(tmp_path / "y"),
             "--config", str(cfg)]
        ) == 2

    def test_single_scene_file_input(self, tmp_path):
        scene_path = tmp_path / "one.json"
        save_scene(canonical_occlusion_scene(), scene_path)
        out = tmp_path / "single"
        assert main(["run", "--images", str(scene_path), "--out", str(out)]) == 0
        results = json.loads((out / "results.json").read_text())
        assert len(results) == 2

    def test_png_input_with_pinned_scene_backends(self, tmp_path):
        from poseloop.backends import render_scene
        from poseloop.imaging import save_image

        scene = canonical_occlusion_scene()
        scene_path = tmp_path / "scene.json"
        save_scene(scene, scene_path)
        photo = tmp_path / "photo_007.png"
        save_image(photo, render_scene(scene))
        out = tmp_path / "photo_run"
        spec = f"synthetic:{scene_path}"
        assert main(
            ["run", "--images", str(photo), "--out", str(out),
             "--detector", spec, "--pose", spec, "--segmenter", spec]
        ) == 0
        results = json.loads((out / "results.json").read_text())
        assert len(results) == 2
        assert all(r["image_id"] == 7 for r in results)  # id from file name

    def test_alpha_one_cli_path(self, tmp_path):
        scene_path = tmp_path / "one.json"
        save_scene(canonical_occlusion_scene(), scene_path)
        out = tmp_path / "alpha1"
        assert main(
            ["run", "--images", str(scene_path), "--out", str(out), "--alpha", "1.0"]
        ) == 0
        prov = json.loads((out / "provenance.json").read_text())
        assert prov["config"]["alpha"] == 1.0
        # without mask conditioning the crowded crop collapses onto the
        # foreground person and only one instance comes out
        results = json.loads((out / "results.json").read_text())
        assert len(results) == 1

    def test_refine_flag_runs_post_pass(self, corpus, tmp_path):
        out = tmp_path / "refined"
        assert main(
            ["run", "--images", str(corpus), "--out", str(out), "--refine"]
        ) == 0
        prov = json.loads((out / "provenance.json").read_text())
        assert prov["config"]["refine_after_loop"] is True
        results = json.loads((out / "results.json").read_text())
        assert results

    def test_null_segmenter_keeps_detector_masks(self, corpus, tmp_path):
        out_full = tmp_path / "full"
        out_none = tmp_path / "none"
        assert main(["run", "--images", str(corpus), "--out", str(out_full)]) == 0
        assert main(
            ["run", "--images", str(corpus), "--out", str(out_none),
             "--segmenter", "none"]
        ) == 0
        prov = json.loads((out_none / "provenance.json").read_text())
        events = [
            e["event"]
            for img in prov["images"]
            for inst in img["instances"]
            for e in inst["events"]
        ]
        assert "segment-failed" in events
        assert "mask-refined" not in events
        # detection still works end to end
        results = json.loads((out_none / "results.json").read_text())
        assert results

    def test_workers_two_matches_sequential(self, corpus, tmp_path):
        seq = tmp_path / "seq"
        par = tmp_path / "par"
        assert main(["run", "--images", str(corpus), "--out", str(seq)]) == 0
        assert main(
            ["run", "--images", str(corpus), "--out", str(par), "--workers", "2"]
        ) == 0
        assert (seq / "results.json").read_bytes() == (par / "results.json").read_bytes()


class TestEvalCommand:
    def test_perfect_results_and_idempotent_report(self, corpus, tmp_path, capsys):
        run_out = tmp_path / "run"
        assert main(["run", "--images", str(corpus), "--out", str(run_out)]) == 0
        reports = []
        for rep in ("r1.json", "r2.json"):
            rep_path = tmp_path / rep
            code = main(
                ["eval", "--gt", str(corpus / "ground_truth.json"),
                 "--results", str(run_out / "results.json"),
                 "--stratify-max-iou", "--out", str(rep_path)]
            )
            assert code == 0
            reports.append(rep_path.read_bytes())
        assert reports[0] == reports[1]
        text = capsys.readouterr().out
        assert "bbox AP @ max_IoU" in text
        report = json.loads(reports[0])
        assert report["tasks"]["results"]["bbox"]["ap"] == pytest.approx(1.0)
        assert report["tasks"]["results"]["keypoints"]["ap"] == pytest.approx(1.0)

    def test_labeled_rows(self, corpus, tmp_path, capsys):
        run_out = tmp_path / "runx"
        assert main(["run", "--images", str(corpus), "--out", str(run_out)]) == 0
        code = main(
            ["eval", "--gt", str(corpus / "ground_truth.json"),
             "--results", f"mine={run_out / 'results.json'}", "--task", "bbox"]
        )
        assert code == 0
        assert "== mine" in capsys.readouterr().out

    def test_schema_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        res = tmp_path / "res.json"
        res.write_text("[]")
        assert main(["eval", "--gt", str(bad), "--results", str(res)]) == 2
