"""
Detection metrics: all-point interpolated AP and mAP over tIoU thresholds.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union
import numpy as np
import pandas as pd
from tal_scale_wizard.src.common import EvaluationError, TalCommon
from tal_scale_wizard.src.localizer import Proposal, temporal_iou
from tal_scale_wizard.src.snippet_data import Dataset, GroundTruthInstance


class ThresholdPreset(str, Enum):
    SHORT_REGIME = "short_regime"  # 0.1:0.1:0.7
    LONG_REGIME = "long_regime"  # 0.5:0.05:0.95

    @classmethod
    def list(cls):
        return [member.value for member in cls.__members__.values()]

    def thresholds(self) -> List[float]:
        if self is ThresholdPreset.SHORT_REGIME:
            return [round(0.1 * i, 2) for i in range(1, 8)]
        return [round(0.5 + 0.05 * i, 2) for i in range(10)]


@dataclass(frozen=True)
class LabeledSegment:
    """
    A ground-truth instance tagged with the video it belongs to.
    """

    video_id: str
    class_id: int
    start: float
    end: float


GroundTruth = Union[LabeledSegment, GroundTruthInstance]


def ground_truth_segments(ds: Dataset) -> List[LabeledSegment]:
    return [
        LabeledSegment(video.id, inst.class_id, inst.start, inst.end)
        for video in ds.videos
        for inst in video.instances
    ]


def video_of(item: Union[Proposal, GroundTruth]) -> str:
    return getattr(item, "video_id", "")


def ranked(preds: Sequence[Proposal]) -> List[Proposal]:
    """
    Confidence descending, ties by earlier start, smaller class_id, earlier end, video id.
    """
    return sorted(preds, key=lambda p: (-p.confidence, p.start, p.class_id, p.end, video_of(p)))


@dataclass
class MatchResult:
    ordered: List[Proposal]
    matched_gt: List[Optional[int]]  # index into gts per ordered prediction, None for a miss
    ious: np.ndarray  # len(ordered) x len(gts), 0 across videos or classes

    @property
    def is_tp(self) -> List[bool]:
        return [m is not None for m in self.matched_gt]


def greedy_match(preds: Sequence[Proposal], gts: Sequence[GroundTruth], iou_threshold: float) -> MatchResult:
    """
    Walk predictions in descending confidence; each takes the highest-IoU unmatched
    ground truth of the same video and class with IoU >= iou_threshold (lowest index on ties).
    """
    ordered = ranked(preds)
    ious = np.zeros((len(ordered), len(gts)))
    for i, p in enumerate(ordered):
        for j, g in enumerate(gts):
            if video_of(p) == video_of(g) and p.class_id == g.class_id:
                ious[i, j] = temporal_iou((p.start, p.end), (g.start, g.end))
    taken = np.zeros(len(gts), dtype=bool)
    matched: List[Optional[int]] = []
    for i in range(len(ordered)):
        candidates = np.where(~taken & (ious[i] >= iou_threshold) & (ious[i] > 0))[0]
        if candidates.size == 0:
            matched.append(None)
            continue
        best = int(candidates[np.argmax(ious[i, candidates])])
        taken[best] = True
        matched.append(best)
    return MatchResult(ordered=ordered, matched_gt=matched, ious=ious)


def average_precision(preds: Sequence[Proposal], gts: Sequence[GroundTruth], iou_threshold: float) -> float:
    """
    All-point interpolated AP of one class: sum of precision at each true-positive rank,
    divided by the number of ground truths. 0 when there are no ground truths.
    """
    if not gts:
        return 0.0
    if not preds:
        return 0.0
    tp = np.array(greedy_match(preds, gts, iou_threshold).is_tp, dtype=np.float64)
    precision = np.cumsum(tp) / np.arange(1, len(tp) + 1)
    return float(np.sum(precision * tp) / len(gts))


@dataclass
class EvalReport:
    thresholds: List[float]
    class_ap: Dict[int, List[float]]  # class_id -> AP per threshold, classes with ground truth only
    map_per_threshold: List[float]
    average_map: float
    num_predictions: int
    num_ground_truths: int
    tag: str = ""

    def to_frame(self) -> pd.DataFrame:
        """
        One row per tIoU threshold: mAP followed by per-class AP columns.
        """
        records = []
        for k, threshold in enumerate(self.thresholds):
            row = {"tiou": threshold, "mAP": self.map_per_threshold[k]}
            for class_id in sorted(self.class_ap):
                row[f"AP_{class_id}"] = self.class_ap[class_id][k]
            records.append(row)
        return TalCommon.to_dataframe(records)

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "thresholds": list(self.thresholds),
            "class_ap": {str(c): list(v) for c, v in sorted(self.class_ap.items())},
            "map_per_threshold": list(self.map_per_threshold),
            "average_map": self.average_map,
            "num_predictions": self.num_predictions,
            "num_ground_truths": self.num_ground_truths,
        }

    @staticmethod
    def from_dict(data: dict) -> "EvalReport":
        return EvalReport(
            thresholds=[float(t) for t in data["thresholds"]],
            class_ap={int(c): [float(x) for x in v] for c, v in data["class_ap"].items()},
            map_per_threshold=[float(x) for x in data["map_per_threshold"]],
            average_map=float(data["average_map"]),
            num_predictions=int(data["num_predictions"]),
            num_ground_truths=int(data["num_ground_truths"]),
            tag=data.get("tag", ""),
        )

    def to_text(self) -> str:
        header = f"Evaluation {self.tag}".rstrip()
        lines = [
            header,
            f"predictions: {self.num_predictions}  ground truths: {self.num_ground_truths}",
            "",
            TalCommon.render_table(self.to_frame()).rstrip("\n"),
            "",
            f"average mAP: {self.average_map:.4f}",
        ]
        return "\n".join(lines) + "\n"


def evaluate_map(
    preds: Sequence[Proposal],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float],
    tag: str = "",
) -> EvalReport:
    """
    Per-class AP at every threshold, mAP over classes with at least one ground truth.

    Example:
        >>> report = evaluate_map(preds, ground_truth_segments(test_ds), ThresholdPreset("short_regime").thresholds())
        >>> report.average_map
    """
    if not gts:
        raise EvaluationError("No ground-truth instances to evaluate against")
    if not thresholds:
        raise ValueError("thresholds must not be empty")
    classes = sorted({g.class_id for g in gts})
    gts_by_class = {c: [g for g in gts if g.class_id == c] for c in classes}
    preds_by_class = {c: [p for p in preds if p.class_id == c] for c in classes}
    ignored = sum(1 for p in preds if p.class_id not in gts_by_class)
    if ignored:
        logging.info(f"{ignored} predictions belong to classes without ground truth")

    class_ap = {
        c: [average_precision(preds_by_class[c], gts_by_class[c], t) for t in thresholds] for c in classes
    }
    map_per_threshold = [float(np.mean([class_ap[c][k] for c in classes])) for k in range(len(thresholds))]
    return EvalReport(
        thresholds=[float(t) for t in thresholds],
        class_ap=class_ap,
        map_per_threshold=map_per_threshold,
        average_map=float(np.mean(map_per_threshold)),
        num_predictions=len(preds),
        num_ground_truths=len(gts),
        tag=tag,
    )
