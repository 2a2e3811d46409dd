"""The pose-mask consistency gate in action.

A refined mask is only adopted when it agrees with the keypoints at least
as well as the mask it replaces: own keypoints should fall inside, other
people's outside. Run:  python demos/demo_consistency_gate.py
"""

from poseloop.consistency import mask_gate, pose_mask_consistency
from poseloop.geometry import BinaryMask


def rect_mask(w, h, x0, y0, x1, y1):
    m = BinaryMask.zeros(w, h)
    m.bits[y0:y1, x0:x1] = True
    return m


def main():
    # person occupies the left half; a neighbour stands on the right
    own_keypoints = [(10, 10), (15, 30), (8, 50), (18, 70)]
    neighbour_keypoints = [(45, 20), (50, 55)]
    detector_mask = rect_mask(60, 80, 0, 0, 25, 80)

    base = pose_mask_consistency(detector_mask, own_keypoints, neighbour_keypoints)
    print(f"detector mask: {base.positives_inside}/{base.positives_total} own "
          f"keypoints inside, {base.negatives_outside}/{base.negatives_total} "
          f"foreign outside -> consistency {base.pmc:.2f}\n")

    print("case 1: the segmenter grabbed the neighbour instead")
    wrong = rect_mask(60, 80, 35, 0, 60, 80)
    outcome = mask_gate(detector_mask, wrong, own_keypoints, neighbour_keypoints)
    print(f"  refined consistency {outcome.refined_report.pmc:.2f} < "
          f"{outcome.original_report.pmc:.2f} -> refined kept: {outcome.refined_kept}\n")

    print("case 2: the segmenter recovered a missing leg")
    chopped = rect_mask(60, 80, 0, 0, 25, 60)      # detector missed below y=60
    full = rect_mask(60, 80, 0, 0, 25, 80)
    outcome = mask_gate(chopped, full, own_keypoints, neighbour_keypoints)
    print(f"  refined consistency {outcome.refined_report.pmc:.2f} >= "
          f"{outcome.original_report.pmc:.2f} -> refined kept: {outcome.refined_kept}\n")

    print("case 3: mask leaking onto the neighbour is penalized")
    leaking = rect_mask(60, 80, 0, 0, 55, 80)
    outcome = mask_gate(detector_mask, leaking, own_keypoints, neighbour_keypoints)
    print(f"  refined consistency {outcome.refined_report.pmc:.2f} < "
          f"{outcome.original_report.pmc:.2f} -> refined kept: {outcome.refined_kept}")


if __name__ == "__main__":
    main()
