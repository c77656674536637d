"""
Why cross-distribution localization fails: snippet/video classification accuracy,
accuracy per attention bin, and the error-category breakdown of predictions.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
import torch
from tal_scale_wizard.analyzer.evaluator import GroundTruth, video_of, greedy_match
from tal_scale_wizard.src.common import TalCommon
from tal_scale_wizard.src.localizer import Proposal, video_class_scores
from tal_scale_wizard.src.snippet_data import Dataset, VideoRecord, snippet_labels
from tal_scale_wizard.src.wtal_model import WtalModel, forward

HIGH_ATTENTION = 0.9
NUM_BINS = 10


class ErrorCategory(str, Enum):
    TRUE_POSITIVE = "true_positive"
    DOUBLE_DETECTION = "double_detection"
    LOCALIZATION_ERROR = "localization_error"
    CONFUSION_ERROR = "confusion_error"
    BACKGROUND_ERROR = "background_error"

    @classmethod
    def list(cls):
        return [member.value for member in cls.__members__.values()]


def _overlaps(p: Proposal, g: GroundTruth) -> bool:
    return video_of(p) == video_of(g) and min(p.end, g.end) > max(p.start, g.start)


def error_breakdown(preds: Sequence[Proposal], gts: Sequence[GroundTruth], iou_threshold: float) -> Dict[str, int]:
    """
    Label every prediction with one category; the counts sum to len(preds).

    Matched predictions are true positives. The rest take the first rule that fires:
    double_detection, localization_error, confusion_error, background_error.
    """
    counts = {name: 0 for name in ErrorCategory.list()}
    if not preds:
        return counts
    match = greedy_match(preds, gts, iou_threshold)
    for i, p in enumerate(match.ordered):
        if match.matched_gt[i] is not None:
            category = ErrorCategory.TRUE_POSITIVE
        elif np.any(match.ious[i] >= iou_threshold):
            # every same-label gt above threshold was already taken
            category = ErrorCategory.DOUBLE_DETECTION
        elif any(_overlaps(p, g) and g.class_id == p.class_id for g in gts):
            category = ErrorCategory.LOCALIZATION_ERROR
        elif any(_overlaps(p, g) for g in gts):
            category = ErrorCategory.CONFUSION_ERROR
        else:
            category = ErrorCategory.BACKGROUND_ERROR
        counts[category.value] += 1
    return counts


def attention_bin(attention: np.ndarray, num_bins: int = NUM_BINS) -> np.ndarray:
    """
    Bin index per snippet: [0, 0.1] is bin 0, (0.1, 0.2] bin 1, ... (0.9, 1.0] bin 9.
    """
    idx = np.ceil(np.asarray(attention, dtype=np.float64) * num_bins).astype(np.int64) - 1
    return np.clip(idx, 0, num_bins - 1)


@dataclass
class DiagnosticsReport:
    video_cls_acc: float
    snippet_cls_acc: float
    high_attn_snippet_acc: float
    bin_counts: List[int]
    bin_correct: List[int]
    num_videos: int
    num_fg_snippets: int
    num_high_attn_snippets: int
    num_snippets: int = 0
    error_counts: Dict[str, int] = field(default_factory=lambda: {name: 0 for name in ErrorCategory.list()})
    iou_threshold: Optional[float] = None
    tag: str = ""

    @property
    def bin_accuracy(self) -> List[Optional[float]]:
        return [c / n if n else None for c, n in zip(self.bin_correct, self.bin_counts)]

    @property
    def num_predictions(self) -> int:
        return int(sum(self.error_counts.values()))

    def with_errors(self, counts: Dict[str, int], iou_threshold: float) -> "DiagnosticsReport":
        return DiagnosticsReport(
            video_cls_acc=self.video_cls_acc,
            snippet_cls_acc=self.snippet_cls_acc,
            high_attn_snippet_acc=self.high_attn_snippet_acc,
            bin_counts=list(self.bin_counts),
            bin_correct=list(self.bin_correct),
            num_videos=self.num_videos,
            num_fg_snippets=self.num_fg_snippets,
            num_high_attn_snippets=self.num_high_attn_snippets,
            num_snippets=self.num_snippets,
            error_counts=dict(counts),
            iou_threshold=iou_threshold,
            tag=self.tag,
        )

    def to_frame(self) -> pd.DataFrame:
        """
        Attention-bin accuracy table; bins without snippets have NaN accuracy.
        """
        n = len(self.bin_counts)
        records = [
            {
                "bin_low": round(k / n, 2),
                "bin_high": round((k + 1) / n, 2),
                "count": self.bin_counts[k],
                "correct": self.bin_correct[k],
                "accuracy": np.nan if acc is None else acc,
            }
            for k, acc in enumerate(self.bin_accuracy)
        ]
        return TalCommon.to_dataframe(records, columns=["bin_low", "bin_high", "count", "correct", "accuracy"])

    def summary_frame(self) -> pd.DataFrame:
        records = [
            {"metric": "A_v", "value": self.video_cls_acc},
            {"metric": "A_s", "value": self.snippet_cls_acc},
            {"metric": "A_s_high", "value": self.high_attn_snippet_acc},
        ]
        records += [{"metric": name, "value": float(count)} for name, count in self.error_counts.items()]
        return TalCommon.to_dataframe(records, columns=["metric", "value"])

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "video_cls_acc": self.video_cls_acc,
            "snippet_cls_acc": self.snippet_cls_acc,
            "high_attn_snippet_acc": self.high_attn_snippet_acc,
            "num_videos": self.num_videos,
            "num_fg_snippets": self.num_fg_snippets,
            "num_high_attn_snippets": self.num_high_attn_snippets,
            "num_snippets": self.num_snippets,
            "bin_counts": list(self.bin_counts),
            "bin_correct": list(self.bin_correct),
            "bin_accuracy": self.bin_accuracy,
            "iou_threshold": self.iou_threshold,
            "error_counts": dict(self.error_counts),
        }

    def to_text(self) -> str:
        lines = [
            f"Diagnostics {self.tag}".rstrip(),
            f"videos: {self.num_videos}  snippets: {self.num_snippets}"
            f"  foreground snippets: {self.num_fg_snippets}"
            f"  high-attention snippets: {self.num_high_attn_snippets}",
            "",
            f"A_v       {self.video_cls_acc:.4f}",
            f"A_s       {self.snippet_cls_acc:.4f}",
            f"A_s(>0.9) {self.high_attn_snippet_acc:.4f}",
            "",
            TalCommon.render_table(self.to_frame()).rstrip("\n"),
        ]
        if self.iou_threshold is not None:
            lines += ["", f"error breakdown at tIoU {self.iou_threshold}:"]
            lines += [f"  {name:<20}{count}" for name, count in self.error_counts.items()]
        return "\n".join(lines) + "\n"


def accuracy_from_outputs(
    outputs: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]],
    videos: Sequence[VideoRecord],
    high_threshold: float = HIGH_ATTENTION,
    num_bins: int = NUM_BINS,
) -> DiagnosticsReport:
    """
    Accuracy analyses from per-video (attention, cas, video class scores) arrays.

    Snippet prediction is the CAS argmax over all classes including background. A_s and
    A_s(>0.9) count only snippets whose ground truth is an action class; the attention-bin
    curve counts every snippet, a background snippet being right when its argmax is the
    background class. A video is correct when its top foreground class is in its label set.
    """
    if len(outputs) != len(videos):
        raise ValueError(f"{len(outputs)} outputs for {len(videos)} videos")
    video_hits = 0
    snippet_total = fg_total = fg_correct = high_total = high_correct = 0
    bin_counts = np.zeros(num_bins, dtype=np.int64)
    bin_correct = np.zeros(num_bins, dtype=np.int64)
    for (attention, cas, scores), video in zip(outputs, videos):
        num_classes = video.num_classes
        top = int(np.argmax(np.asarray(scores)[:num_classes]))
        video_hits += int(video.label[top] == 1)

        gt = snippet_labels(video)
        fg = gt < num_classes
        correct = np.argmax(cas, axis=1) == gt
        fg_total += int(fg.sum())
        fg_correct += int((correct & fg).sum())
        high = fg & (attention > high_threshold)
        high_total += int(high.sum())
        high_correct += int((correct & high).sum())

        snippet_total += len(gt)
        bins = attention_bin(attention, num_bins)
        np.add.at(bin_counts, bins, 1)
        np.add.at(bin_correct, bins, correct.astype(np.int64))

    if fg_total == 0:
        logging.warning("No foreground snippets; snippet accuracies reported as 0")
    return DiagnosticsReport(
        video_cls_acc=video_hits / len(videos) if videos else 0.0,
        snippet_cls_acc=fg_correct / fg_total if fg_total else 0.0,
        high_attn_snippet_acc=high_correct / high_total if high_total else 0.0,
        bin_counts=bin_counts.tolist(),
        bin_correct=bin_correct.tolist(),
        num_videos=len(videos),
        num_fg_snippets=fg_total,
        num_high_attn_snippets=high_total,
        num_snippets=snippet_total,
    )


def snippet_diagnostics(model: WtalModel, ds: Dataset, topk_ratio: int = 8, tag: str = "") -> DiagnosticsReport:
    """
    Example:
        >>> report = snippet_diagnostics(base_model, target_test)
        >>> report.snippet_cls_acc, report.bin_accuracy
    """
    if not any(v.instances for v in ds.videos):
        raise ValueError(f"{ds.name} has no ground-truth instances")
    outputs = []
    with torch.no_grad():
        for video in ds.videos:
            out = forward(model, video.features, dropout_on=False)
            attention, cas = out.numpy()
            outputs.append((attention, cas, video_class_scores(out, topk_ratio)))
    report = accuracy_from_outputs(outputs, ds.videos)
    report.tag = tag
    logging.info(
        f"Diagnostics {ds.name}: A_v {report.video_cls_acc:.4f} A_s {report.snippet_cls_acc:.4f} "
        f"A_s(>0.9) {report.high_attn_snippet_acc:.4f}"
    )
    return report
