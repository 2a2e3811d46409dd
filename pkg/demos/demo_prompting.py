"""How keypoints become segmenter prompts.

Shows the spread-first selection order, the facial cap, the confidence
threshold, and what the box-prompt policy does for isolated vs entangled
instances. Run:  python demos/demo_prompting.py
"""

import numpy as np

from poseloop import PromptPolicy, loop_policy, refinement_policy
from poseloop.geometry import BBox, Pose, get_skeleton
from poseloop.prompting import build_prompt_set, select_positive_prompts

COCO = get_skeleton("coco17")


def main():
    # a pose with confident head cluster and spread limbs
    pts = np.zeros((17, 3))
    layout = {
        0: (50, 10, 0.95),   # nose, most confident
        1: (53, 8, 0.90),    # eyes: capped to one facial point total
        2: (47, 8, 0.90),
        9: (95, 27, 0.80),   # left wrist, far right
        10: (5, 27, 0.80),   # right wrist, far left
        15: (58, 95, 0.70),  # ankles, bottom
        16: (42, 95, 0.70),
        11: (58, 60, 0.20),  # hips below the confidence threshold
        12: (42, 60, 0.20),
    }
    for i, (x, y, c) in layout.items():
        pts[i] = [x, y, c]
    pose = Pose("coco17", pts)

    policy = loop_policy()
    print(f"loop policy: threshold {policy.t_c}, up to {policy.n_max} points, "
          f"box prompts: {policy.bbox_mode}")
    picks = select_positive_prompts(pose, COCO, policy)
    print("selection order (most confident first, then maximum spread):")
    names = {tuple(pts[i, :2]): COCO.keypoint_names[i] for i in layout}
    for j, p in enumerate(picks):
        print(f"  {j + 1}. {names[p]:<14} at {p}")
    print("note: one facial point only, hips skipped (below threshold)\n")

    # the box policy of the refinement pass
    policy = refinement_policy()
    box = BBox(0, 0, 100, 100)
    isolated = build_prompt_set(pose, box, [], COCO, policy, max_iou_with_neighbors=0.1)
    crowded = build_prompt_set(pose, box, [], COCO, policy, max_iou_with_neighbors=0.7)
    print(f"refinement policy: boxes only for isolated instances "
          f"(overlap < {policy.bbox_iou_threshold})")
    print(f"  isolated (overlap 0.1): box={isolated.bbox is not None}, "
          f"{len(isolated.positives)} positives")
    print(f"  entangled (overlap 0.7): box={crowded.bbox is not None}, "
          f"{len(crowded.positives)} positives")
    print("fewer points with a box, more without: the box already localizes")


if __name__ == "__main__":
    main()
