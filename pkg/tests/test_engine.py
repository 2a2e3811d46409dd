import dataclasses
import json
import sys

import numpy as np
import pytest

from poseloop.backends import BackendSet, load_scene, render_scene, save_scene
from poseloop.backends.synthetic import SyntheticScene
from poseloop.consistency import pose_mask_consistency
from poseloop.engine import LoopConfig, refine_once, run_loop
from poseloop.geometry import BinaryMask, bbox_iou, tight_bbox
from poseloop.prompting import PromptPolicy, refinement_policy
from poseloop.synth import (
    canonical_occlusion_scene,
    side_by_side_scene,
    single_person_scene,
)


@pytest.fixture(scope="module")
def canonical():
    return canonical_occlusion_scene()


def run_on(scene, config=None, v_det=0.5):
    config = config or LoopConfig()
    with BackendSet.synthetic(scene, v_det=v_det) as backends:
        return run_loop(render_scene(scene), backends, config)


class TestLoopBasics:
    def test_blank_scene_zero_instances_one_iteration(self):
        scene = SyntheticScene(48, 36, [])
        result = run_on(scene)
        assert result.instances == []
        assert len(result.iterations) == 1
        assert result.error is None

    def test_single_person_terminates_after_finding_nothing_new(self):
        scene = single_person_scene()
        result = run_on(scene)
        assert len(result.instances) == 1
        assert len(result.iterations) == 2
        assert result.iterations[0].accepted == 1
        assert result.iterations[1].accepted == 0
        inst = result.instances[0]
        assert inst.mask == scene.instances[0].mask
        events = [e["event"] for e in inst.events]
        assert events[0] == "detected"
        assert "pose-estimated" in events
        assert "mask-refined" in events

    def test_two_isolated_people_found_in_first_pass(self):
        scene = side_by_side_scene()
        result = run_on(scene)
        assert len(result.instances) == 2
        assert all(i.iteration_born == 1 for i in result.instances)


class TestOcclusionRecovery:
    def test_single_iteration_finds_only_foreground(self, canonical):
        result = run_on(canonical, LoopConfig(max_iterations=1))
        assert len(result.instances) == 1
        assert result.instances[0].iteration_born == 1

    def test_two_iterations_recover_background(self, canonical):
        result = run_on(canonical, LoopConfig(max_iterations=2))
        assert len(result.instances) == 2
        assert [i.iteration_born for i in result.instances] == [1, 2]
        top = canonical.top_of_stack()
        assert result.instances[0].mask == BinaryMask(top == 0)
        assert result.instances[1].mask == BinaryMask(top == 1)
        # recovered instance matches its visible-region truth box
        bg_box = tight_bbox(BinaryMask(top == 1))
        assert bbox_iou(result.instances[1].bbox, bg_box) == pytest.approx(1.0)

    def test_masked_fraction_non_decreasing(self, canonical):
        result = run_on(canonical, LoopConfig(max_iterations=3))
        fractions = result.masked_fractions
        assert all(b >= a for a, b in zip(fractions, fractions[1:]))
        assert fractions[-1] > 0

    def test_third_iteration_finds_nothing(self, canonical):
        result = run_on(canonical, LoopConfig(max_iterations=3))
        assert len(result.instances) == 2
        assert len(result.iterations) == 3
        assert result.iterations[2].accepted == 0

    def test_gate_contract_holds_for_final_masks(self, canonical):
        config = LoopConfig()
        scene = canonical
        with BackendSet.synthetic(scene) as backends:
            image = render_scene(scene)
            result = run_loop(image, backends, config)
        for inst in result.instances:
            detected = next(e for e in inst.events if e["event"] == "detected")
            assert detected["has_mask"]
            positives = inst.confident_keypoints(config.loop_prompts.t_c)
            if not positives:
                continue
            others = [o for o in result.instances if o is not inst]
            negatives = [
                pt for o in others for pt in o.confident_keypoints(config.loop_prompts.t_c)
            ]
            final_pmc = pose_mask_consistency(inst.mask, positives, negatives).pmc
            refined_events = [e for e in inst.events if e["event"] == "mask-refined"]
            gates = [e["gate"] for e in refined_events if "gate" in e and e["gate"]]
            for g in gates:
                assert final_pmc >= g["original"]["pmc"] - 1e-12


class TestDeterminism:
    def test_provenance_replay_identical(self, canonical):
        a = run_on(canonical)
        b = run_on(canonical)
        pa = json.dumps(a.provenance_json(0), sort_keys=True)
        pb = json.dumps(b.provenance_json(0), sort_keys=True)
        assert pa == pb
        ra = json.dumps(a.to_results_json(0), sort_keys=True)
        rb = json.dumps(b.to_results_json(0), sort_keys=True)
        assert ra == rb

    def test_subprocess_backends_match_in_process(self, canonical, tmp_path):
        scene_path = tmp_path / "scene.json"
        save_scene(canonical, scene_path)
        cmd = (
            f"{sys.executable} -m poseloop.backends.synthetic_server "
            f"{scene_path} --kind {{kind}}"
        )
        in_proc = run_on(canonical)
        with BackendSet.from_specs(
            cmd.format(kind="detector"),
            cmd.format(kind="pose"),
            cmd.format(kind="segmenter"),
        ) as backends:
            remote = run_loop(render_scene(canonical), backends, LoopConfig())
        assert json.dumps(remote.provenance_json(0), sort_keys=True) == json.dumps(
            in_proc.provenance_json(0), sort_keys=True
        )


class TestConfigKnobs:
    def test_mask_conditioning_enables_recovery(self, canonical):
        # alpha=1 degenerates to box-conditioned pose: the second-pass crop is
        # dominated by the foreground person, its pose collapses onto the
        # existing instance and pose NMS drops it. Dimming the background
        # (alpha<1) steers the pose to the re-detected person.
        unconditioned = run_on(canonical, LoopConfig(alpha=1.0))
        assert len(unconditioned.instances) == 1
        conditioned = run_on(canonical, LoopConfig(alpha=0.8))
        assert len(conditioned.instances) == 2

    def test_det_score_min_filters(self, canonical):
        # with v_det low the background is emitted at score ~0.3 in pass one,
        # but a det_score_min above that drops it again
        result = run_on(canonical, LoopConfig(det_score_min=0.5), v_det=0.05)
        assert result.iterations[0].accepted == 1

    def test_pose_nms_suppresses_duplicate_rediscovery(self, canonical):
        # an always-on detector (v_det tiny) re-reports the background person
        # in pass one and two; pose NMS must keep a single copy
        result = run_on(canonical, LoopConfig(max_iterations=3), v_det=0.01)
        assert len(result.instances) == 2
        assert any(
            e["event"] == "suppressed"
            for inst in result.discarded
            for e in inst.events
        ) or len(result.discarded) == 0

    def test_config_serialization_round_trip(self):
        config = LoopConfig(max_iterations=4, alpha=0.5,
                            loop_prompts=PromptPolicy(t_c=0.2, n_max=3))
        restored = LoopConfig.from_json(json.loads(json.dumps(config.to_json())))
        assert restored == config

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            LoopConfig(max_iterations=0)
        with pytest.raises(ValueError):
            LoopConfig(alpha=1.2)


class TestRefinePass:
    def test_refine_keeps_or_improves_consistency(self, canonical):
        config = LoopConfig()
        with BackendSet.synthetic(canonical) as backends:
            image = render_scene(canonical)
            result = run_loop(image, backends, config)
            before = [
                pose_mask_consistency(
                    i.mask,
                    i.confident_keypoints(config.refine_prompts.t_c),
                    [],
                ).pmc
                for i in result.instances
            ]
            refine_once(image, result.instances, backends, config)
            after = [
                pose_mask_consistency(
                    i.mask,
                    i.confident_keypoints(config.refine_prompts.t_c),
                    [],
                ).pmc
                for i in result.instances
            ]
        assert all(b >= a - 1e-12 for a, b in zip(before, after))

    def test_refine_with_discarding_gate_is_noop_on_perfect_masks(self, canonical):
        config = LoopConfig()
        with BackendSet.synthetic(canonical) as backends:
            image = render_scene(canonical)
            result = run_loop(image, backends, config)
            masks_before = [i.mask for i in result.instances]
            refine_once(image, result.instances, backends, config,
                        policy=refinement_policy())
            masks_after = [i.mask for i in result.instances]
        assert masks_before == masks_after


class TestMergedInstanceSplit:
    def test_pose_prompted_refinement_splits_a_merged_mask(self, canonical):
        # a merged detection covering both people: keypoint prompts pull the
        # segmenter to one person, while box-only prompting keeps the merge
        from poseloop.engine import Instance
        from poseloop.geometry import Pose
        from poseloop.prompting import PromptSet

        top = canonical.top_of_stack()
        merged = BinaryMask(top >= 0)
        merged_box = tight_bbox(merged)
        fg = canonical.instances[0]
        pose_pts = fg.keypoints.copy()
        pose_pts[:, 2] = 0.9
        inst = Instance(
            id=1,
            iteration_born=1,
            bbox=merged_box,
            mask=merged,
            pose=Pose("coco17", pose_pts),
            det_score=0.9,
            pose_score=0.9,
        )
        image = render_scene(canonical)
        with BackendSet.synthetic(canonical) as backends:
            # box-only prompting cannot split: the rule returns everything
            # visible inside the box
            box_only, _ = backends.segmenter._rules.segment(
                image, PromptSet(bbox=merged_box)
            )
            assert box_only == merged

            refine_once(image, [inst], backends, LoopConfig())
        fg_visible = BinaryMask(top == 0)
        assert inst.mask == fg_visible
        assert inst.mask.area < merged.area


class TestBboxOnlyDetector:
    def test_maskless_detections_take_the_crop_only_path(self):
        # strip masks from the synthetic detector: poses must still come out,
        # instances carry empty masks, and the union never grows
        scene = single_person_scene()

        class MasklessDetector:
            def __init__(self, inner):
                self.inner = inner

            def handshake(self):
                info = self.inner.handshake()
                return dataclasses.replace(info, emits_masks=False)

            def detect(self, image):
                return [
                    dataclasses.replace(d, mask=None) for d in self.inner.detect(image)
                ]

            def close(self):
                self.inner.close()

        backends = BackendSet.synthetic(scene)
        backends = dataclasses.replace(
            backends, detector=MasklessDetector(backends.detector)
        )
        result = run_loop(render_scene(scene), backends, LoopConfig(max_iterations=2))
        assert result.error is None
        assert len(result.instances) == 1
        inst = result.instances[0]
        assert inst.pose is not None
        # crop-only conditioning still reaches the right person
        assert np.allclose(inst.pose.xy, scene.instances[0].keypoints[:, :2])
        # the segmenter can still refine: prompts come from the pose
        assert any(e["event"] == "mask-refined" for e in inst.events)
        detected = next(e for e in inst.events if e["event"] == "detected")
        assert detected["has_mask"] is False


class TestFailurePaths:
    def test_dead_backend_aborts_with_partial_result(self, canonical, tmp_path):
        scene_path = tmp_path / "scene.json"
        save_scene(canonical, scene_path)
        # detector exits immediately: transport failure must abort cleanly
        with BackendSet.from_specs(
            f"{sys.executable} -c 'import sys; sys.exit(0)'",
            f"{sys.executable} -m poseloop.backends.synthetic_server {scene_path} --kind pose",
            f"{sys.executable} -m poseloop.backends.synthetic_server {scene_path} --kind segmenter",
        ) as backends:
            result = run_loop(render_scene(canonical), backends, LoopConfig())
        assert result.error is not None
        assert result.instances == []

    def test_segmenter_refusal_keeps_detector_mask(self, canonical):
        class RefusingSegmenter:
            def handshake(self):
                from poseloop.backends.protocol import HandshakeInfo, PROTOCOL_VERSION

                return HandshakeInfo(PROTOCOL_VERSION, "segmenter", ("coco17",), False)

            def segment(self, image, prompts):
                from poseloop.backends.protocol import BackendRefused

                raise BackendRefused("segment", "overloaded", "try later")

            def close(self):
                pass

        backends = BackendSet.synthetic(canonical)
        backends = dataclasses.replace(backends, segmenter=RefusingSegmenter())
        result = run_loop(render_scene(canonical), backends, LoopConfig(max_iterations=1))
        assert result.error is None
        assert len(result.instances) == 1
        inst = result.instances[0]
        assert any(e["event"] == "segment-failed" for e in inst.events)
        # detector mask kept
        top = canonical.top_of_stack()
        assert inst.mask == BinaryMask(top == 0)
