import numpy as np
import pytest
from tal_scale_wizard.analyzer.evaluator import (
    EvalReport,
    LabeledSegment,
    ThresholdPreset,
    average_precision,
    evaluate_map,
    ground_truth_segments,
)
from tal_scale_wizard.src.common import EvaluationError
from tal_scale_wizard.src.localizer import Proposal, temporal_iou
from tal_scale_wizard.src.snippet_data import GroundTruthInstance


def _iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def _brute_force_ap(preds, gts, threshold):
    """
    Recall-increment form: sum over ranks of precision x (recall_r - recall_{r-1}).
    """
    if not gts:
        return 0.0
    ordered = sorted(preds, key=lambda p: (-p.confidence, p.start, p.class_id, p.end))
    used = [False] * len(gts)
    tp, ap, previous_recall = 0, 0.0, 0.0
    for rank, p in enumerate(ordered, start=1):
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            iou = _iou((p.start, p.end), (g.start, g.end))
            if not used[j] and iou >= threshold and iou > 0 and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            used[best] = True
            tp += 1
        recall = tp / len(gts)
        ap += (tp / rank) * (recall - previous_recall)
        previous_recall = recall
    return ap


def test_temporal_iou_examples():
    assert temporal_iou((0, 10), (5, 15)) == pytest.approx(1 / 3)
    assert temporal_iou((2, 4), (2, 4)) == 1.0
    assert temporal_iou((0, 1), (1, 2)) == 0.0
    with pytest.raises(ValueError):
        temporal_iou((3, 3), (0, 5))


def test_temporal_iou_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a0, b0 = rng.random(2) * 10
        a, b = (a0, a0 + rng.random() + 0.01), (b0, b0 + rng.random() + 0.01)
        iou = temporal_iou(a, b)
        assert iou == temporal_iou(b, a)
        assert 0.0 <= iou <= 1.0
        assert temporal_iou(a, a) == 1.0


def test_average_precision_examples():
    gt = [GroundTruthInstance(0, 0.0, 10.0)]
    assert average_precision([Proposal(0, 0.0, 10.0, 0.9)], gt, 0.5) == 1.0
    duplicates = [Proposal(0, 0.0, 10.0, 0.9), Proposal(0, 0.0, 10.0, 0.8)]
    assert average_precision(duplicates, gt, 0.5) == 1.0
    assert average_precision([Proposal(0, 0.0, 10.0, 0.9)], [], 0.5) == 0.0
    assert average_precision([], gt, 0.5) == 0.0
    ranked_second = [Proposal(0, 20.0, 30.0, 0.9), Proposal(0, 0.0, 10.0, 0.8)]
    assert average_precision(ranked_second, gt, 0.5) == pytest.approx(0.5)


def test_average_precision_matches_brute_force():
    rng = np.random.default_rng(42)
    for case in range(1000):
        gts = []
        for _ in range(int(rng.integers(0, 5))):
            s = float(rng.integers(0, 12))
            gts.append(GroundTruthInstance(0, s, s + float(rng.integers(1, 6))))
        preds = []
        for _ in range(int(rng.integers(0, 7))):
            s = float(rng.integers(0, 12))
            preds.append(Proposal(0, s, s + float(rng.integers(1, 6)), float(rng.choice([rng.random(), 0.5]))))
        threshold = (0.1, 0.3, 0.5, 0.7)[case % 4]
        assert average_precision(preds, gts, threshold) == pytest.approx(
            _brute_force_ap(preds, gts, threshold), abs=1e-12
        )


def test_average_precision_rank_invariance_and_monotonicity():
    rng = np.random.default_rng(9)
    for _ in range(100):
        gts = [GroundTruthInstance(0, s, s + 3.0) for s in (0.0, 10.0, 20.0)]
        preds = [
            Proposal(0, s, s + float(rng.integers(1, 6)), float(rng.random()))
            for s in rng.integers(0, 25, size=5).astype(float)
        ]
        rescaled = [p.with_confidence(2 * p.confidence + 1) for p in preds]
        aps = [average_precision(preds, gts, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert aps[2] == average_precision(rescaled, gts, 0.5)
        assert all(a >= b for a, b in zip(aps, aps[1:]))


def test_matching_stays_within_a_video():
    gts = [LabeledSegment("b", 0, 0.0, 10.0)]
    assert average_precision([Proposal(0, 0.0, 10.0, 0.9, "a")], gts, 0.5) == 0.0
    assert average_precision([Proposal(0, 0.0, 10.0, 0.9, "b")], gts, 0.5) == 1.0


def test_threshold_presets():
    assert ThresholdPreset("short_regime").thresholds() == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    long = ThresholdPreset.LONG_REGIME.thresholds()
    assert len(long) == 10 and long[0] == 0.5 and long[-1] == 0.95
    assert ThresholdPreset.list() == ["short_regime", "long_regime"]


def test_perfect_and_empty_predictions(tiny_test):
    gts = ground_truth_segments(tiny_test)
    perfect = [Proposal(g.class_id, g.start, g.end, 1.0, g.video_id) for g in gts]
    thresholds = ThresholdPreset.LONG_REGIME.thresholds()
    report = evaluate_map(perfect, gts, thresholds)
    assert report.map_per_threshold == [1.0] * len(thresholds)
    assert report.average_map == 1.0
    empty = evaluate_map([], gts, thresholds)
    assert empty.average_map == 0.0
    assert empty.num_ground_truths == len(gts)


def test_empty_ground_truth_rejected():
    with pytest.raises(EvaluationError):
        evaluate_map([Proposal(0, 0.0, 1.0, 0.5)], [], [0.5])


def test_two_class_scenario():
    gts = [
        LabeledSegment("v", 0, 0.0, 10.0),
        LabeledSegment("v", 0, 20.0, 30.0),
        LabeledSegment("v", 1, 40.0, 50.0),
    ]
    preds = [
        Proposal(0, 60.0, 70.0, 0.95, "v"),  # FP
        Proposal(0, 0.0, 10.0, 0.9, "v"),  # IoU 1
        Proposal(0, 21.0, 30.0, 0.8, "v"),  # IoU 0.9
        Proposal(1, 45.0, 55.0, 0.6, "v"),  # IoU 1/3
        Proposal(1, 40.0, 50.0, 0.5, "v"),  # IoU 1
        Proposal(2, 0.0, 5.0, 0.99, "v"),  # class without ground truth
    ]
    report = evaluate_map(preds, gts, [0.5, 0.95])
    assert sorted(report.class_ap) == [0, 1]
    assert report.class_ap[0] == pytest.approx([(1 / 2 + 2 / 3) / 2, 0.25])
    assert report.class_ap[1] == pytest.approx([0.5, 0.5])
    assert report.map_per_threshold == pytest.approx([(7 / 12 + 0.5) / 2, 0.375])
    assert report.average_map == pytest.approx(((7 / 12 + 0.5) / 2 + 0.375) / 2)
    assert report.num_predictions == 6

    frame = report.to_frame()
    assert list(frame.columns) == ["tiou", "mAP", "AP_0", "AP_1"]
    restored = EvalReport.from_dict(report.to_dict())
    assert restored.class_ap == report.class_ap and restored.average_map == report.average_map
    assert "average mAP" in report.to_text()
