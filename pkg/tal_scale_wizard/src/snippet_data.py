"""
Snippet-level video data model and the seeded synthetic benchmark.

Two distributions share class prototypes and differ in a visual offset vector and in the
scale of action durations, which is the gap the adaptation stage has to close.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator
from tal_scale_wizard.src.common import GenerationError, TalCommon


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"

    @classmethod
    def list(cls):
        return [member.value for member in cls.__members__.values()]


@dataclass(frozen=True)
class GroundTruthInstance:
    class_id: int
    start: float
    end: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if self.start < 0:
            raise ValueError(f"start must be >= 0, got {self.start}")
        if not self.end > self.start:
            raise ValueError(f"end ({self.end}) must exceed start ({self.start})")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """
    N x D snippet features, stored as float32 (the on-disk width).
    """

    data: np.ndarray
    snippet_stride: float

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"features must be a non-empty N x D matrix, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("features contain non-finite values")
        if not self.snippet_stride > 0:
            raise ValueError(f"snippet_stride must be > 0, got {self.snippet_stride}")

    @property
    def num_snippets(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def equals(self, other: "FeatureSequence") -> bool:
        return (
            self.snippet_stride == other.snippet_stride
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class VideoRecord:
    id: str
    features: FeatureSequence
    label: np.ndarray
    instances: Tuple[GroundTruthInstance, ...]
    duration: float

    def __post_init__(self) -> None:
        num_classes = len(self.label)
        present = np.zeros(num_classes, dtype=np.int8)
        for inst in self.instances:
            if inst.class_id >= num_classes:
                raise ValueError(f"{self.id}: class_id {inst.class_id} >= {num_classes}")
            if inst.end > self.duration + 1e-9:
                raise ValueError(f"{self.id}: instance ends after the video ({inst.end} > {self.duration})")
            present[inst.class_id] = 1
        if not np.array_equal(present, np.asarray(self.label, dtype=np.int8)):
            raise ValueError(f"{self.id}: label does not match the annotated instances")

    @property
    def num_classes(self) -> int:
        return int(len(self.label))

    def equals(self, other: "VideoRecord") -> bool:
        return (
            self.id == other.id
            and self.duration == other.duration
            and self.instances == other.instances
            and np.array_equal(self.label, other.label)
            and self.features.equals(other.features)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    distribution_id: str
    split: str
    videos: Tuple[VideoRecord, ...]
    num_classes: int

    def __post_init__(self) -> None:
        if self.split not in Split.list():
            raise ValueError(f"Unknown split: {self.split}")
        dims = {v.features.dim for v in self.videos}
        if len(dims) > 1:
            raise ValueError(f"{self.distribution_id}-{self.split}: mixed feature dims {sorted(dims)}")
        for video in self.videos:
            if video.num_classes != self.num_classes:
                raise ValueError(f"{video.id}: label length {video.num_classes} != {self.num_classes}")

    @property
    def name(self) -> str:
        return f"{self.distribution_id}-{self.split}"

    @property
    def feature_dim(self) -> int:
        if not self.videos:
            raise ValueError(f"{self.name} has no videos")
        return self.videos[0].features.dim

    def equals(self, other: "Dataset") -> bool:
        return (
            self.distribution_id == other.distribution_id
            and self.split == other.split
            and self.num_classes == other.num_classes
            and len(self.videos) == len(other.videos)
            and all(a.equals(b) for a, b in zip(self.videos, other.videos))
        )


class SynthConfig(BaseModel):
    """
    Knobs of one synthetic distribution split.

    Class prototypes come from `prototype_seed` and are shared by every distribution; the
    offset vector comes from (`seed`, `distribution_id`) and is shared by both splits.
    """

    distribution_id: str = "short"
    split: Literal["train", "test"] = "train"
    num_classes: int = 8
    feature_dim: int = 64
    videos_per_split: int = 120
    snippet_stride: float = 0.64
    duration_median: float = 3.0
    duration_log_sigma: float = 0.35
    video_length_range: Tuple[float, float] = (40.0, 80.0)
    instances_per_video_range: Tuple[int, int] = (1, 4)
    domain_offset_scale: float = 1.0
    noise_sigma: float = 0.3
    boundary_blend_width: int = 2
    # interior snippets farther than salient_span seconds from both boundaries carry
    # at most sustain_level of the action prototype; 1.0 keeps every interior snippet pure
    salient_span: float = 2.0
    sustain_level: float = 1.0
    seed: int = 0
    prototype_seed: int = 0
    max_placement_attempts: int = 50

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.videos_per_split < 0:
            raise ValueError("videos_per_split must be >= 0")
        if not self.snippet_stride > 0:
            raise ValueError("snippet_stride must be > 0")
        if not self.duration_median > 0:
            raise ValueError("duration_median must be > 0")
        if self.duration_log_sigma < 0:
            raise ValueError("duration_log_sigma must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.domain_offset_scale < 0:
            raise ValueError("domain_offset_scale must be >= 0")
        if self.boundary_blend_width < 0:
            raise ValueError("boundary_blend_width must be >= 0")
        if self.salient_span < 0:
            raise ValueError("salient_span must be >= 0")
        if not (0.0 <= self.sustain_level <= 1.0):
            raise ValueError(f"sustain_level must lie in [0, 1], got {self.sustain_level}")
        lo, hi = self.video_length_range
        if not (0 < lo <= hi):
            raise ValueError(f"video_length_range must satisfy 0 < min <= max, got {self.video_length_range}")
        lo, hi = self.instances_per_video_range
        if not (1 <= lo <= hi):
            raise ValueError(
                f"instances_per_video_range must satisfy 1 <= min <= max, got {self.instances_per_video_range}"
            )
        if self.max_placement_attempts < 1:
            raise ValueError("max_placement_attempts must be >= 1")
        return self


# Per-dataset median durations of the three reference benchmarks (seconds)
SYNTH_PRESETS: Dict[str, dict] = {
    "short": {"duration_median": 3.0, "video_length_range": (40.0, 80.0), "instances_per_video_range": (2, 5)},
    "medium": {"duration_median": 11.2, "video_length_range": (60.0, 120.0), "instances_per_video_range": (1, 4)},
    "long": {"duration_median": 28.5, "video_length_range": (100.0, 180.0), "instances_per_video_range": (1, 3)},
}


def synth_preset(name: str, **overrides) -> SynthConfig:
    """
    >>> cfg = synth_preset("long", split="test", seed=3)
    """
    if name not in SYNTH_PRESETS:
        raise ValueError(f"Unknown synthetic preset: {name}")
    values = {"distribution_id": name, **SYNTH_PRESETS[name]}
    values.update(overrides)
    return SynthConfig(**values)


def class_prototypes(cfg: SynthConfig) -> np.ndarray:
    """
    (C_I + 1) x D unit-norm prototypes; the last row is the background prototype.
    """
    rng = TalCommon.stage_rng(cfg.prototype_seed, "prototypes", str(cfg.num_classes), str(cfg.feature_dim))
    protos = rng.standard_normal((cfg.num_classes + 1, cfg.feature_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def domain_offset(cfg: SynthConfig) -> np.ndarray:
    rng = TalCommon.stage_rng(cfg.seed, cfg.distribution_id, "offset")
    direction = rng.standard_normal(cfg.feature_dim)
    return direction / np.linalg.norm(direction) * cfg.domain_offset_scale


def _place_instances(
    rng: np.random.Generator, cfg: SynthConfig, duration: float
) -> List[GroundTruthInstance]:
    lo, hi = cfg.instances_per_video_range
    count = int(rng.integers(lo, hi + 1))
    placed: List[GroundTruthInstance] = []
    for _ in range(count):
        for _attempt in range(cfg.max_placement_attempts):
            length = float(cfg.duration_median * np.exp(cfg.duration_log_sigma * rng.standard_normal()))
            class_id = int(rng.integers(0, cfg.num_classes))
            if length >= duration:
                continue
            start = float(rng.uniform(0.0, duration - length))
            end = start + length
            if any(start < other.end and other.start < end for other in placed):
                continue
            placed.append(GroundTruthInstance(class_id=class_id, start=start, end=end))
            break
    return sorted(placed, key=lambda x: (x.start, x.class_id))


def _foreground_weights(
    instances: Sequence[GroundTruthInstance],
    num_snippets: int,
    stride: float,
    width: int,
    salient_span: float = 2.0,
    sustain_level: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per snippet: the dominant instance class and its foreground mixing weight in [0, 1].

    Long instances fade to sustain_level in their interior, so only the stretches near
    their boundaries look like a clean action.
    """
    centers = np.arange(num_snippets) + 0.5
    weight = np.zeros(num_snippets)
    owner = np.full(num_snippets, -1, dtype=np.int64)
    for inst in instances:
        b_start, b_end = inst.start / stride, inst.end / stride
        inside = (centers >= b_start) & (centers < b_end)
        dist = np.minimum(np.abs(centers - b_start), np.abs(centers - b_end))
        if width == 0:
            lam = inside.astype(float)
        else:
            signed = np.where(inside, dist, -dist)
            lam = np.clip(0.5 + 0.5 * signed / width, 0.0, 1.0)
            lam = np.where(inside | (dist < width), lam, 0.0)
        sustained = inside & (dist * stride > salient_span)
        lam = np.where(sustained, np.minimum(lam, sustain_level), lam)
        better = lam > weight
        weight = np.where(better, lam, weight)
        owner = np.where(better, inst.class_id, owner)
    return owner, weight


def _make_video(
    rng: np.random.Generator,
    cfg: SynthConfig,
    video_id: str,
    protos: np.ndarray,
    offset: np.ndarray,
) -> VideoRecord:
    lo, hi = cfg.video_length_range
    num_snippets = max(1, int(round(float(rng.uniform(lo, hi)) / cfg.snippet_stride)))
    duration = num_snippets * cfg.snippet_stride
    instances = _place_instances(rng, cfg, duration)
    owner, weight = _foreground_weights(
        instances,
        num_snippets,
        cfg.snippet_stride,
        cfg.boundary_blend_width,
        cfg.salient_span,
        cfg.sustain_level,
    )

    background = protos[-1]
    fg = protos[np.where(owner >= 0, owner, cfg.num_classes)]
    mix = weight[:, None] * fg + (1.0 - weight[:, None]) * background[None, :]
    noise = cfg.noise_sigma * rng.standard_normal((num_snippets, cfg.feature_dim))
    data = (mix + offset[None, :] + noise).astype(np.float32)

    label = np.zeros(cfg.num_classes, dtype=np.int8)
    for inst in instances:
        label[inst.class_id] = 1
    return VideoRecord(
        id=video_id,
        features=FeatureSequence(data=data, snippet_stride=cfg.snippet_stride),
        label=label,
        instances=tuple(instances),
        duration=duration,
    )


def generate_synthetic_dataset(cfg: SynthConfig) -> Dataset:
    """
    Deterministic given cfg (seed included).

    >>> ds = generate_synthetic_dataset(synth_preset("short", split="train"))
    """
    if cfg.duration_median >= cfg.video_length_range[1]:
        raise GenerationError(
            "duration_median",
            f"median instance duration {cfg.duration_median}s does not fit videos of at most "
            f"{cfg.video_length_range[1]}s",
        )
    protos = class_prototypes(cfg)
    offset = domain_offset(cfg)
    rng = TalCommon.stage_rng(cfg.seed, cfg.distribution_id, cfg.split, "videos")

    videos: List[VideoRecord] = []
    empty = 0
    for i in range(cfg.videos_per_split):
        video = _make_video(rng, cfg, f"{cfg.distribution_id}-{cfg.split}-{i:04d}", protos, offset)
        if not video.instances:
            empty += 1
            continue
        videos.append(video)
    if cfg.videos_per_split > 0 and not videos:
        raise GenerationError(
            "duration_median", "no instance could be placed in any video; shorten durations or lengthen videos"
        )
    if empty:
        logging.warning(f"{cfg.distribution_id}-{cfg.split}: dropped {empty} videos without placeable instances")
    logging.info(f"Generated {len(videos)} videos for {cfg.distribution_id}-{cfg.split}")
    return Dataset(
        distribution_id=cfg.distribution_id,
        split=cfg.split,
        videos=tuple(videos),
        num_classes=cfg.num_classes,
    )


def snippet_labels(video: VideoRecord) -> np.ndarray:
    """
    Class of the instance covering each snippet center, background index C_I when uncovered.
    On overlap the instance with the earliest start wins.
    """
    stride = video.features.snippet_stride
    centers = np.arange(video.features.num_snippets) * stride + stride / 2
    labels = np.full(len(centers), video.num_classes, dtype=np.int64)
    assigned = np.zeros(len(centers), dtype=bool)
    for inst in sorted(video.instances, key=lambda x: (x.start, x.class_id)):
        covered = (centers >= inst.start) & (centers < inst.end) & ~assigned
        labels[covered] = inst.class_id
        assigned |= covered
    return labels


def duration_statistics(datasets: Sequence[Dataset]) -> pd.DataFrame:
    """
    Instance duration quartiles per distribution, overall and per class.
    """
    records = []
    for ds in datasets:
        for video in ds.videos:
            for inst in video.instances:
                records.append(
                    {"distribution": ds.distribution_id, "split": ds.split, "class_id": inst.class_id, "duration": inst.length}
                )
    columns = ["distribution", "split", "class", "count", "q25", "median", "q75", "mean"]
    if not records:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame(records)

    def _summary(group: pd.DataFrame, cls: str) -> dict:
        d = group["duration"]
        return {
            "distribution": group["distribution"].iloc[0],
            "split": group["split"].iloc[0],
            "class": cls,
            "count": int(d.count()),
            "q25": float(d.quantile(0.25)),
            "median": float(d.median()),
            "q75": float(d.quantile(0.75)),
            "mean": float(d.mean()),
        }

    rows = []
    for (_dist, _split), group in df.groupby(["distribution", "split"], sort=True):
        rows.append(_summary(group, "all"))
        for class_id, cgroup in group.groupby("class_id", sort=True):
            rows.append(_summary(cgroup, str(class_id)))
    return pd.DataFrame(rows, columns=columns)


def median_duration(ds: Dataset) -> Optional[float]:
    lengths = [inst.length for v in ds.videos for inst in v.instances]
    if not lengths:
        return None
    return float(np.median(lengths))
