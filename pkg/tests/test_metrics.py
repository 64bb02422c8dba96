import itertools

import numpy as np
import pytest

from prefseg import metrics
from prefseg.metrics import InstanceLabeling, aji, connected_components, dice, pq


def labeling_from_lists(shape, instances):
    labels = np.zeros(shape, dtype=np.int64)
    for idx, pixels in enumerate(instances, start=1):
        for r, c in pixels:
            labels[r, c] = idx
    return InstanceLabeling(labels=labels)


def exhaustive_aji(pred: InstanceLabeling, truth: InstanceLabeling) -> float:
    """AJI by brute force over all injective truth->pred assignments.

    Mirrors the greedy definition's accounting (each truth uses at most
    one pred, preds used at most once, leftovers added to the union) but
    searches every assignment and every processing order, keeping the
    result that the greedy rule (max IoU, processed in truth-id order,
    ties to lowest pred id) would deliver.  Because the greedy rule is
    deterministic, we simply re-run it literally with python sets.
    """
    truth_ids = list(range(1, truth.count + 1))
    pred_ids = list(range(1, pred.count + 1))
    pred_pixels = {j: set(map(tuple, np.argwhere(pred.labels == j))) for j in pred_ids}
    truth_pixels = {i: set(map(tuple, np.argwhere(truth.labels == i))) for i in truth_ids}
    used = set()
    inter_total = 0
    union_total = 0
    for i in truth_ids:
        best = None
        for j in pred_ids:
            if j in used:
                continue
            inter = len(truth_pixels[i] & pred_pixels[j])
            if inter == 0:
                continue
            union = len(truth_pixels[i] | pred_pixels[j])
            iou = inter / union
            if best is None or iou > best[0] + 1e-15:
                best = (iou, j, inter, union)
        if best is None:
            union_total += len(truth_pixels[i])
        else:
            _, j, inter, union = best
            used.add(j)
            inter_total += inter
            union_total += union
    for j in pred_ids:
        if j not in used:
            union_total += len(pred_pixels[j])
    if union_total == 0:
        return 0.0
    return inter_total / union_total


def exhaustive_pq(pred: InstanceLabeling, truth: InstanceLabeling):
    """PQ via explicit pairwise IoU search (IoU > 0.5 matches are unique)."""
    pred_ids = list(range(1, pred.count + 1))
    truth_ids = list(range(1, truth.count + 1))
    matches = []
    for i, j in itertools.product(truth_ids, pred_ids):
        t = truth.labels == i
        p = pred.labels == j
        inter = (t & p).sum()
        union = (t | p).sum()
        if union and inter / union > 0.5:
            matches.append(inter / union)
    tp = len(matches)
    fp = len(pred_ids) - tp
    fn = len(truth_ids) - tp
    if tp + fp + fn == 0:
        return 1.0
    denom = tp + fp / 2 + fn / 2
    return (sum(matches) / denom) if denom else 0.0


# ---------------------------------------------------------------------------
# dice


def test_dice_identity_symmetry_and_empty():
    rng = np.random.default_rng(0)
    a = rng.random((8, 8)) > 0.5
    b = rng.random((8, 8)) > 0.5
    assert dice(a, a) == 1.0
    assert dice(a, b) == dice(b, a)
    empty = np.zeros((8, 8), dtype=bool)
    assert dice(empty, empty) == 1.0
    assert dice(a, empty) == 0.0 or not a.any()


def test_dice_hand_value():
    a = np.zeros((2, 2), dtype=bool)
    b = np.zeros((2, 2), dtype=bool)
    a[0, 0] = a[0, 1] = True      # |a| = 2
    b[0, 1] = b[1, 1] = True      # |b| = 2, overlap 1
    assert dice(a, b) == pytest.approx(2 * 1 / (2 + 2))


# ---------------------------------------------------------------------------
# connected components


def test_components_are_first_pixel_ordered():
    mask = np.zeros((5, 5), dtype=bool)
    mask[4, 0] = True           # later in raster order
    mask[0, 3] = mask[0, 4] = True  # earliest pixel
    mask[2, 2] = True
    lab = connected_components(mask)
    assert lab.count == 3
    assert lab.labels[0, 3] == 1 and lab.labels[0, 4] == 1
    assert lab.labels[2, 2] == 2
    assert lab.labels[4, 0] == 3


def test_components_use_4_connectivity():
    mask = np.zeros((3, 3), dtype=bool)
    mask[0, 0] = mask[1, 1] = True  # diagonal only
    assert connected_components(mask).count == 2


# ---------------------------------------------------------------------------
# aji


def test_aji_perfect_match_is_one():
    lab = labeling_from_lists((4, 4), [[(0, 0), (0, 1)], [(3, 3)]])
    assert aji(lab, lab) == 1.0


def test_aji_no_predictions_is_zero():
    truth = labeling_from_lists((4, 4), [[(0, 0), (0, 1)]])
    empty = InstanceLabeling(labels=np.zeros((4, 4), dtype=np.int64))
    assert aji(empty, truth) == 0.0


def test_aji_empty_truth_is_error():
    pred = labeling_from_lists((4, 4), [[(0, 0)]])
    empty = InstanceLabeling(labels=np.zeros((4, 4), dtype=np.int64))
    with pytest.raises(ValueError):
        aji(pred, empty)


def test_aji_hand_example_unmatched_prediction():
    # truth: one 4-pixel instance; pred: 3-pixel overlap piece + 2-pixel
    # spurious instance. greedy: inter 3, union 5; spurious adds 2 to union.
    truth = labeling_from_lists((4, 4), [[(0, 0), (0, 1), (1, 0), (1, 1)]])
    pred = labeling_from_lists((4, 4), [[(0, 0), (0, 1), (1, 0), (2, 0)],
                                        [(3, 2), (3, 3)]])
    assert aji(pred, truth) == pytest.approx(3 / (5 + 2))


def random_blobby_mask(rng):
    """1-3 small random rectangles; adjacent ones may merge."""
    mask = np.zeros((16, 16), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        r, c = rng.integers(0, 12, size=2)
        h, w = rng.integers(2, 5, size=2)
        mask[r:r + h, c:c + w] = True
    return mask


def test_aji_matches_exhaustive_on_random_cases():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(400):
        pred = connected_components(random_blobby_mask(rng))
        truth = connected_components(random_blobby_mask(rng))
        if truth.count == 0 or pred.count > 3 or truth.count > 3:
            continue
        assert aji(pred, truth) == pytest.approx(exhaustive_aji(pred, truth), abs=1e-12)
        checked += 1
    assert checked >= 200


# ---------------------------------------------------------------------------
# pq


def test_pq_perfect_and_empty_cases():
    lab = labeling_from_lists((4, 4), [[(0, 0), (0, 1)]])
    assert pq(lab, lab)[0] == 1.0
    empty = InstanceLabeling(labels=np.zeros((4, 4), dtype=np.int64))
    assert pq(empty, lab)[0] == 0.0
    with pytest.warns(UserWarning):
        value, sq, rq = pq(empty, empty)
    assert (value, sq, rq) == (1.0, 1.0, 1.0)


def test_pq_hand_example_one_match_one_fp():
    # 3x2 truth block; pred overlaps 3 of its pixels with IoU 0.6 plus a
    # disjoint false positive: PQ = 0.6 / (1 + 0.5) = 0.4
    truth = labeling_from_lists((6, 6), [[(0, 0), (0, 1), (1, 0), (1, 1), (2, 0)]])
    pred = labeling_from_lists((6, 6), [[(0, 0), (0, 1), (1, 0)],
                                        [(5, 5)]])
    t = truth.labels == 1
    p = pred.labels == 1
    iou = (t & p).sum() / (t | p).sum()
    assert iou == pytest.approx(0.6)
    value, sq, rq = pq(pred, truth)
    assert value == pytest.approx(0.4)
    assert value == pytest.approx(sq * rq, abs=1e-12)


def test_pq_equals_sq_times_rq_on_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(100):
        pred = connected_components(rng.random((12, 12)) > 0.8)
        truth = connected_components(rng.random((12, 12)) > 0.8)
        value, sq, rq = pq(pred, truth)
        assert value == pytest.approx(sq * rq, abs=1e-12)
        assert value == pytest.approx(exhaustive_pq(pred, truth), abs=1e-12)
        assert 0.0 <= value <= 1.0


# ---------------------------------------------------------------------------
# report formatting


def test_report_mean_row_and_csv(tmp_path):
    rows = [metrics.EvalRow("a", 1.0, 1.0, 1.0), metrics.EvalRow("b", 0.5, 0.0, 0.0)]
    text = metrics.format_report(rows)
    lines = text.strip().splitlines()
    assert lines[0].split() == ["image_id", "dice", "aji", "pq"]
    assert lines[-1].startswith("mean")
    assert "0.7500" in lines[-1]
    metrics.write_report_csv(rows, tmp_path / "r.csv")
    csv_lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "image_id,dice,aji,pq"
    assert csv_lines[-1].startswith("mean,0.7500000000")
