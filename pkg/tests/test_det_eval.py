import numpy as np
import pytest

import det_oracle
from repspark.det_eval import (
    DEFAULT_IOU_THRESHOLDS,
    Detection,
    GroundTruth,
    average_precision,
    evaluate,
    iou_matrix,
    match_detections,
    nms,
)
from repspark.loss_zoo import Box


def det(box, score, image=0, cls=0):
    return Detection(image, cls, Box(*box), score)


def gt(box, image=0, cls=0):
    return GroundTruth(image, cls, Box(*box))


def random_scenario(rng, n_images=3, n_classes=2, max_dets=5, max_gts=3, distinct_scores=False):
    """Small integer-grid scenes so overlaps, IoU ties and score ties all occur."""
    dets, gts = [], []
    scores = list(rng.permutation(np.arange(1, 100) / 100.0)) if distinct_scores else None

    def box():
        x, y = rng.integers(0, 6, 2)
        w, h = rng.integers(1, 5, 2)
        return (float(x), float(y), float(x + w), float(y + h))

    for img in range(n_images):
        for _ in range(rng.integers(0, max_gts + 1)):
            gts.append(GroundTruth(img, int(rng.integers(n_classes)), Box(*box())))
        for _ in range(rng.integers(0, max_dets + 1)):
            s = scores.pop() if distinct_scores else float(rng.choice([0.2, 0.5, 0.5, 0.8, 0.9, 1.0]))
            dets.append(Detection(img, int(rng.integers(n_classes)), Box(*box()), s))
    return dets, gts


def to_oracle(dets, gts):
    d = [{"image": r.image_id, "cls": r.class_id, "box": (r.box.x1, r.box.y1, r.box.x2, r.box.y2),
          "score": r.score, "idx": i} for i, r in enumerate(dets)]
    g = [{"image": r.image_id, "cls": r.class_id, "box": (r.box.x1, r.box.y1, r.box.x2, r.box.y2)} for r in gts]
    return d, g


# -- matching ------------------------------------------------------------------


def test_match_examples():
    g = [gt((0, 0, 10, 10))]
    # IoU 0.6: pred [0,0,10,6]
    assert match_detections([det((0, 0, 10, 6), 0.9)], g, 0.5) == [True]
    d = [det((0, 0, 10, 6), 0.9), det((0, 0, 10, 5.5), 0.8)]
    assert match_detections(d, g, 0.5) == [True, False]
    assert match_detections(d, [], 0.5) == [False, False]


def test_match_flags_follow_input_order():
    g = [gt((0, 0, 10, 10))]
    d = [det((0, 0, 10, 5.5), 0.3), det((0, 0, 10, 10), 0.9)]
    assert match_detections(d, g, 0.5) == [False, True]


def test_match_score_tie_uses_input_order():
    g = [gt((0, 0, 10, 10))]
    d = [det((0, 0, 10, 6), 0.5), det((0, 0, 10, 10), 0.5)]
    assert match_detections(d, g, 0.5) == [True, False]


def test_match_gt_tie_takes_lowest_index():
    g = [gt((0, 0, 4, 4)), gt((0, 0, 4, 4))]
    assert match_detections([det((0, 0, 4, 4), 0.9), det((0, 0, 4, 4), 0.8)], g, 0.5) == [True, True]


def test_match_mixed_partition_rejected():
    with pytest.raises(ValueError, match="partition"):
        match_detections([det((0, 0, 1, 1), 0.5, image=0)], [gt((0, 0, 1, 1), image=1)], 0.5)


def test_iou_matrix_hand():
    m = iou_matrix([[0, 0, 2, 2]], [[1, 1, 3, 3], [5, 5, 6, 6]])
    np.testing.assert_allclose(m, [[1 / 7, 0.0]])


# -- AP ------------------------------------------------------------------------


def test_ap_hand_fixtures():
    assert average_precision([True], 1) == 1.0
    assert average_precision([True, False], 1) == 1.0
    assert average_precision([False, True], 1) == 0.5


def test_ap_exclusion_rules():
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0
    assert average_precision([], 3) == 0.0


def test_ap_exact_recall_points():
    # recall hits 0.3 exactly at rank 3; that sample must count
    flags = [True] * 3 + [False] * 3
    assert average_precision(flags, 10) == pytest.approx(det_oracle.ap_101(flags, 10), abs=1e-15)
    assert average_precision(flags, 10) == pytest.approx(31 / 101, abs=1e-15)


def test_ap_continuous():
    assert average_precision([False, True], 1, "continuous") == 0.5
    assert average_precision([True, False, True], 2, "continuous") == pytest.approx(0.5 + 0.5 * 2 / 3)
    with pytest.raises(ValueError):
        average_precision([True], 1, "11pt")


@pytest.mark.parametrize("seed", range(40))
def test_ap_matches_oracle_random_lists(seed):
    rng = np.random.default_rng(seed)
    flags = list(rng.random(rng.integers(1, 30)) < 0.5)
    n_gt = int(sum(flags) + rng.integers(0, 4))
    want = det_oracle.ap_101(flags, n_gt)
    got = average_precision(flags, n_gt)
    assert got == pytest.approx(want, abs=1e-12)


# -- evaluate ------------------------------------------------------------------


def test_perfect_predictions():
    gts = [gt((0, 0, 4, 4)), gt((5, 5, 9, 9), cls=1), gt((1, 1, 3, 3), image=1)]
    dets = [Detection(g.image_id, g.class_id, g.box, 1.0) for g in gts]
    r = evaluate(dets, gts)
    assert r.map50 == r.map50_95 == r.precision == r.recall == 1.0


def test_no_predictions():
    r = evaluate([], [gt((0, 0, 4, 4))])
    assert r.map50 == 0.0 and r.recall == 0.0 and r.map50_95 == 0.0


def test_evaluate_errors():
    with pytest.raises(ValueError, match="empty"):
        evaluate([], [])
    with pytest.raises(ValueError, match="ascending"):
        evaluate([], [gt((0, 0, 1, 1))], [0.7, 0.5])
    with pytest.raises(ValueError):
        Detection(0, 0, Box(0, 0, 1, 1), 1.5)


def test_hallucinated_class_scores_zero():
    r = evaluate([det((0, 0, 4, 4), 0.9, cls=1)], [gt((0, 0, 4, 4))], classes=[0, 1, 2])
    assert r.per_class_ap[1][0.5] == 0.0
    assert r.per_class_ap[2][0.5] is None
    assert r.map50 == 0.0  # class 0 missed, class 1 hallucinated, class 2 excluded


@pytest.mark.parametrize("seed", range(200))
def test_evaluate_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_scenario(rng)
    classes = [0, 1]
    if not dets and not gts:
        return
    r = evaluate(dets, gts, DEFAULT_IOU_THRESHOLDS, classes)
    od, og = to_oracle(dets, gts)
    o = det_oracle.evaluate(od, og, DEFAULT_IOU_THRESHOLDS, classes)
    for c in classes:
        for t in DEFAULT_IOU_THRESHOLDS:
            a, b = r.per_class_ap[c][t], o["per_class"][c][t]
            assert (a is None) == (b is None)
            if a is not None:
                assert a == pytest.approx(b, abs=1e-12)
    for t in DEFAULT_IOU_THRESHOLDS:
        assert r.per_threshold_map[t] == pytest.approx(o["per_thr"][t], abs=1e-12)
    assert r.map50_95 == pytest.approx(o["map50_95"], abs=1e-12)
    assert (r.tp, r.fp, r.fn) == (o["tp"], o["fp"], o["fn"])


@pytest.mark.parametrize("seed", range(30))
def test_metric_properties(seed):
    rng = np.random.default_rng(1000 + seed)
    dets, gts = random_scenario(rng, max_dets=8, max_gts=4)
    if not gts:
        return
    r = evaluate(dets, gts, classes=[0, 1])
    vals = [r.map50, r.map50_95, r.precision, r.recall] + list(r.per_threshold_map.values())
    assert all(0.0 <= v <= 1.0 for v in vals)
    pm = list(r.per_threshold_map.values())
    assert min(pm) - 1e-15 <= r.map50_95 <= max(pm) + 1e-15
    for c, aps in r.per_class_ap.items():
        seq = [aps[t] for t in DEFAULT_IOU_THRESHOLDS if aps[t] is not None]
        assert all(a >= b for a, b in zip(seq, seq[1:]))


@pytest.mark.parametrize("seed", range(30))
def test_permutation_invariance_distinct_scores(seed):
    rng = np.random.default_rng(2000 + seed)
    dets, gts = random_scenario(rng, distinct_scores=True)
    if not dets and not gts:
        return
    a = evaluate(dets, gts, classes=[0, 1])
    pd = [dets[i] for i in rng.permutation(len(dets))]
    pg = [gts[i] for i in rng.permutation(len(gts))]
    b = evaluate(pd, pg, classes=[0, 1])
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("seed", range(30))
def test_adding_worst_false_positive_never_helps(seed):
    rng = np.random.default_rng(3000 + seed)
    dets, gts = random_scenario(rng)
    if not gts:
        return
    base = evaluate(dets, gts, classes=[0, 1])
    extra = dets + [Detection(0, int(rng.integers(2)), Box(100, 100, 101, 101), 0.0)]
    worse = evaluate(extra, gts, classes=[0, 1])
    for c in (0, 1):
        for t in DEFAULT_IOU_THRESHOLDS:
            a, b = base.per_class_ap[c][t], worse.per_class_ap[c][t]
            if a is not None:
                assert b <= a + 1e-15


def test_operating_point():
    gts = [gt((0, 0, 10, 10)), gt((20, 20, 30, 30))]
    dets = [det((0, 0, 10, 10), 0.9), det((20, 20, 30, 30), 0.2), det((50, 50, 60, 60), 0.3)]
    r = evaluate(dets, gts)
    assert (r.tp, r.fp, r.fn) == (1, 1, 1)
    assert r.precision == 0.5 and r.recall == 0.5
    r2 = evaluate(dets, gts, score_threshold=0.1)
    assert (r2.tp, r2.fp, r2.fn) == (2, 1, 0)


def test_map50_without_half_threshold():
    gts = [gt((0, 0, 10, 10))]
    dets = [det((0, 0, 10, 6), 0.9)]  # IoU 0.6
    r = evaluate(dets, gts, iou_thresholds=[0.7, 0.8])
    assert r.map50 == 1.0 and r.map50_95 == 0.0


# -- NMS -----------------------------------------------------------------------


def nms_reference(dets, thr):
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep = []
    while remaining:
        i = remaining.pop(0)
        keep.append(dets[i])
        a = (dets[i].box.x1, dets[i].box.y1, dets[i].box.x2, dets[i].box.y2)
        remaining = [j for j in remaining
                     if det_oracle.iou(a, (dets[j].box.x1, dets[j].box.y1, dets[j].box.x2, dets[j].box.y2)) <= thr]
    return keep


def test_nms_examples():
    disjoint = [det((0, 0, 1, 1), 0.5), det((2, 2, 3, 3), 0.7)]
    assert nms(disjoint, 0.5) == [disjoint[1], disjoint[0]]
    dup = [det((0, 0, 4, 4), 0.8), det((0, 0, 4, 4), 0.9)]
    assert nms(dup, 0.5) == [dup[1]]
    with pytest.raises(ValueError):
        nms([det((0, 0, 1, 1), 0.5), det((0, 0, 1, 1), 0.5, cls=1)], 0.5)


@pytest.mark.parametrize("seed", range(25))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    dets = []
    x = 0.0
    for _ in range(rng.integers(1, 12)):
        x += rng.uniform(0, 3)  # overlapping chain
        dets.append(det((x, 0, x + 4, 4), float(rng.uniform())))
    thr = float(rng.choice([0.1, 0.3, 0.5]))
    assert nms(dets, thr) == nms_reference(dets, thr)
