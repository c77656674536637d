"""
Inference: video-level class scores, multi-threshold proposals on the attention sequence,
outer-inner-contrast scoring and per-class Gaussian soft-NMS.
"""
import math
import asyncio
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import torch
import asyncify
from pydantic import BaseModel, Field, model_validator
from tal_scale_wizard.database.store_utils import ReportStore
from tal_scale_wizard.src.common import TalCommon
from tal_scale_wizard.src.snippet_data import Dataset, VideoRecord
from tal_scale_wizard.src.wtal_model import ForwardOutput, WtalModel, aggregate_topk, forward


def default_attention_thresholds() -> List[float]:
    return [round(0.10 + 0.05 * i, 2) for i in range(17)]


class InferenceConfig(BaseModel):
    class_threshold: float = 0.2
    attention_thresholds: List[float] = Field(default_factory=default_attention_thresholds)
    nms_sigma: float = 0.3
    nms_min_score: float = 1e-4
    outer_margin: float = 0.25
    topk_ratio: int = 8

    @model_validator(mode="after")
    def _check(self) -> "InferenceConfig":
        ths = self.attention_thresholds
        if not ths:
            raise ValueError("attention_thresholds must not be empty")
        if any(not 0 < t < 1 for t in ths):
            raise ValueError("attention_thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(ths, ths[1:])):
            raise ValueError("attention_thresholds must be strictly increasing")
        if not self.nms_sigma > 0:
            raise ValueError("nms_sigma must be > 0")
        if self.outer_margin < 0:
            raise ValueError("outer_margin must be >= 0")
        if self.topk_ratio < 1:
            raise ValueError("topk_ratio must be >= 1")
        return self


@dataclass(frozen=True)
class Proposal:
    class_id: int
    start: float
    end: float
    confidence: float
    video_id: str = ""

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if not self.end > self.start:
            raise ValueError(f"end ({self.end}) must exceed start ({self.start})")

    def with_confidence(self, confidence: float) -> "Proposal":
        return Proposal(self.class_id, self.start, self.end, confidence, self.video_id)


Interval = Tuple[float, float]


def temporal_iou(a: Interval, b: Interval) -> float:
    """
    Example:
        >>> temporal_iou((0, 10), (5, 15))
        0.3333333333333333
    """
    (a_start, a_end), (b_start, b_end) = a, b
    if not a_end > a_start or not b_end > b_start:
        raise ValueError(f"Degenerate interval: {a} vs {b}")
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return float(inter / union)


def video_class_scores(out: ForwardOutput, r_agg: int) -> np.ndarray:
    """
    Top-k aggregation of the attention-suppressed CAS, after softmax.
    """
    with torch.no_grad():
        scores = aggregate_topk(out.attention.unsqueeze(1) * out.cas, r_agg)
    return scores.detach().cpu().numpy()


def attention_runs(attention: np.ndarray, threshold: float) -> List[Tuple[int, int]]:
    """
    Maximal runs [i, j] (inclusive) of snippets with attention >= threshold.
    """
    mask = np.concatenate([[False], np.asarray(attention) >= threshold, [False]])
    edges = np.flatnonzero(np.diff(mask.astype(np.int8)))
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def _outer_inner_contrast(signal: np.ndarray, i: int, j: int, margin: float) -> float:
    n = len(signal)
    inner = float(signal[i : j + 1].mean())
    m = math.ceil(margin * (j - i + 1))
    outer = np.concatenate([signal[max(0, i - m) : i], signal[j + 1 : min(n, j + 1 + m)]])
    outer_mean = float(outer.mean()) if outer.size else 0.0
    return inner - outer_mean


def generate_proposals(
    out: ForwardOutput,
    selected_classes: Sequence[int],
    cfg: InferenceConfig,
    stride: float,
    class_scores: Optional[np.ndarray] = None,
    video_id: str = "",
) -> List[Proposal]:
    """
    Class-agnostic boundaries from every attention threshold, scored per selected class.
    """
    attention, cas = out.numpy()
    if class_scores is None:
        class_scores = video_class_scores(out, cfg.topk_ratio)
    best: Dict[Tuple[int, int, int], float] = {}
    for threshold in cfg.attention_thresholds:
        for i, j in attention_runs(attention, threshold):
            for c in selected_classes:
                signal = attention * cas[:, c]
                confidence = _outer_inner_contrast(signal, i, j, cfg.outer_margin) + float(class_scores[c])
                key = (int(c), i, j)
                if key not in best or confidence > best[key]:
                    best[key] = confidence
    return [
        Proposal(class_id=c, start=i * stride, end=(j + 1) * stride, confidence=conf, video_id=video_id)
        for (c, i, j), conf in sorted(best.items())
    ]


def _rank_key(p: Proposal) -> Tuple[float, float, int, float]:
    return (-p.confidence, p.start, p.class_id, p.end)


def soft_nms(proposals: Sequence[Proposal], cfg: InferenceConfig) -> List[Proposal]:
    """
    Gaussian soft-NMS applied per class; output by confidence descending, ties by earlier
    start then smaller class_id.
    """
    kept: List[Proposal] = []
    by_class: Dict[int, List[Proposal]] = {}
    for p in proposals:
        if p.confidence >= cfg.nms_min_score:
            by_class.setdefault(p.class_id, []).append(p)
    for class_id in sorted(by_class):
        remaining = list(by_class[class_id])
        while remaining:
            top = min(remaining, key=_rank_key)
            remaining.remove(top)
            kept.append(top)
            decayed = []
            for p in remaining:
                iou = temporal_iou((top.start, top.end), (p.start, p.end))
                conf = p.confidence * math.exp(-(iou * iou) / cfg.nms_sigma)
                if conf >= cfg.nms_min_score:
                    decayed.append(p.with_confidence(conf))
            remaining = decayed
    return sorted(kept, key=_rank_key)


def localize(params: WtalModel, video: VideoRecord, cfg: InferenceConfig) -> List[Proposal]:
    with torch.no_grad():
        out = forward(params, video.features, dropout_on=False)
    scores = video_class_scores(out, cfg.topk_ratio)
    selected = [c for c in range(video.num_classes) if scores[c] > cfg.class_threshold]
    if not selected:
        return []
    proposals = generate_proposals(
        out, selected, cfg, video.features.snippet_stride, class_scores=scores, video_id=video.id
    )
    return soft_nms(proposals, cfg)


class Localizer:
    """
    Run localize over a dataset, fanned out in groups and collected in input order.

    Example:
        >>> loc = Localizer(model, InferenceConfig(), workers=8)
        >>> preds = await loc.localize_all(dataset)
    """

    def __init__(self, model: WtalModel, cfg: InferenceConfig, workers: int = 8) -> None:
        self.model = model
        self.cfg = cfg
        self.workers = max(1, workers)

    @asyncify
    def localize_one(self, video: VideoRecord) -> List[Proposal]:
        return localize(self.model, video, self.cfg)

    async def localize_all(self, ds: Dataset) -> List[Proposal]:
        results: List[Proposal] = []
        groups = TalCommon.split_list(list(ds.videos), self.workers)
        for index, videos in enumerate(groups):
            logging.debug(f"Localizing group {index + 1}/{len(groups)} of {ds.name}")
            per_video = await asyncio.gather(*[self.localize_one(v) for v in videos])
            for proposals in per_video:
                results.extend(proposals)
        logging.info(f"Localized {len(ds.videos)} videos of {ds.name}: {len(results)} proposals")
        return results


def localize_dataset(model: WtalModel, ds: Dataset, cfg: InferenceConfig, workers: int = 8) -> List[Proposal]:
    return asyncio.run(Localizer(model, cfg, workers).localize_all(ds))


def prediction_records(proposals: Sequence[Proposal]) -> List[dict]:
    """
    Prediction file rows sorted by video_id then confidence descending.
    """
    ordered = sorted(proposals, key=lambda p: (p.video_id, -p.confidence, p.start, p.class_id, p.end))
    return [
        {"video_id": p.video_id, "class_id": p.class_id, "start": p.start, "end": p.end, "confidence": p.confidence}
        for p in ordered
    ]


def proposals_from_records(records: Sequence[dict]) -> List[Proposal]:
    return [
        Proposal(
            class_id=int(r["class_id"]),
            start=float(r["start"]),
            end=float(r["end"]),
            confidence=float(r["confidence"]),
            video_id=str(r["video_id"]),
        )
        for r in records
    ]


def save_predictions(path: str, proposals: Sequence[Proposal]) -> str:
    ReportStore.write_json(path, prediction_records(proposals))
    logging.info(f"Saved {len(proposals)} predictions to {path}")
    return path


def load_predictions(path: str) -> List[Proposal]:
    return proposals_from_records(ReportStore.read_json(path))
