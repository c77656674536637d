"""
Stage-1 base model: temporal embedder, class-agnostic attention branch and per-snippet
classification branch, trained with the top-k MIL classification loss.
"""
import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from pydantic import BaseModel, model_validator
from tal_scale_wizard.src.common import GradientError, TalCommon
from tal_scale_wizard.src.snippet_data import Dataset, FeatureSequence, VideoRecord

LOG_CLAMP = 1e-12
DTYPE = torch.float64


class TrainConfig(BaseModel):
    learning_rate: float = 3e-5
    batch_size: int = 30
    epochs: int = 50
    topk_ratio: int = 8
    dropout: float = 0.1
    hidden_dim: int = 128
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.topk_ratio < 1:
            raise ValueError("topk_ratio must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        return self


@dataclass
class ForwardOutput:
    """
    attention: (N,) values in [0, 1]; cas: (N, C_I + 1) rows on the simplex.
    """

    attention: torch.Tensor
    cas: torch.Tensor

    def detach(self) -> "ForwardOutput":
        return ForwardOutput(self.attention.detach(), self.cas.detach())

    def numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.attention.detach().cpu().numpy(), self.cas.detach().cpu().numpy()


@dataclass
class VideoScores:
    y_base: torch.Tensor
    y_supp: torch.Tensor


class WtalModel(nn.Module):
    """
    Two-branch snippet model; its parameters are the ModelParams of both stages.

    Usage:
        >>> model = WtalModel(feature_dim=64, num_classes=8, hidden_dim=128)
        >>> model.reset_parameters(seed=0)
        >>> out = forward(model, video.features)
    """

    PARAM_ORDER = (
        "embed.weight",
        "embed.bias",
        "attention.weight",
        "attention.bias",
        "classifier.weight",
        "classifier.bias",
    )

    def __init__(self, feature_dim: int, num_classes: int, hidden_dim: int = 128, dropout: float = 0.1) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        self.embed = nn.Conv1d(feature_dim, hidden_dim, kernel_size=3, padding=1)
        self.attention = nn.Conv1d(hidden_dim, 1, kernel_size=1)
        self.classifier = nn.Conv1d(hidden_dim, num_classes + 1, kernel_size=1)
        self.to(DTYPE)

    @property
    def background_index(self) -> int:
        return self.num_classes

    def dims(self) -> Dict[str, int]:
        return {"feature_dim": self.feature_dim, "num_classes": self.num_classes, "hidden_dim": self.hidden_dim}

    def reset_parameters(self, seed: int, stage: str = "init") -> None:
        """
        Uniform in +-1/sqrt(fan_in) from a named substream of seed.
        """
        gen = TalCommon.torch_generator(seed, stage)
        with torch.no_grad():
            for layer in (self.embed, self.attention, self.classifier):
                fan_in = layer.in_channels * layer.kernel_size[0]
                bound = 1.0 / math.sqrt(fan_in)
                for p in (layer.weight, layer.bias):
                    p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)

    def clone(self) -> "WtalModel":
        return copy.deepcopy(self)

    def ordered_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        named = dict(self.named_parameters())
        return [(name, named[name]) for name in self.PARAM_ORDER]

    def flat_vector(self) -> np.ndarray:
        return np.concatenate([p.detach().cpu().numpy().ravel() for _, p in self.ordered_parameters()])

    def forward(
        self,
        feats: torch.Tensor,
        dropout_on: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> ForwardOutput:
        """
        feats: (N, D) float64 tensor
        """
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ValueError(f"feature shape {tuple(feats.shape)} does not match feature_dim {self.feature_dim}")
        x = feats.T.unsqueeze(0)  # 1, D, N
        h = torch.relu(self.embed(x))
        if dropout_on and self.dropout > 0:
            keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= self.dropout
            h = h * keep / (1.0 - self.dropout)
        attention = torch.sigmoid(self.attention(h))[0, 0]
        cas = torch.softmax(self.classifier(h)[0].T, dim=1)
        return ForwardOutput(attention=attention, cas=cas)


def as_tensor(feats: FeatureSequence) -> torch.Tensor:
    return torch.from_numpy(np.asarray(feats.data, dtype=np.float64))


def forward(
    params: WtalModel,
    feats: FeatureSequence,
    dropout_on: bool = False,
    rng: Optional[torch.Generator] = None,
) -> ForwardOutput:
    return params(as_tensor(feats), dropout_on=dropout_on, generator=rng)


def topk_count(num_snippets: int, r_agg: int) -> int:
    return max(1, math.ceil(num_snippets / r_agg))


def aggregate_topk(scores: torch.Tensor, r_agg: int) -> torch.Tensor:
    """
    Mean of the k largest entries per class column, then softmax over classes.
    """
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError(f"scores must be N x C with N >= 1, got {tuple(scores.shape)}")
    k = topk_count(scores.shape[0], r_agg)
    top, _ = torch.topk(scores, k, dim=0)
    return torch.softmax(top.mean(dim=0), dim=0)


def video_scores(out: ForwardOutput, r_agg: int) -> VideoScores:
    y_base = aggregate_topk(out.cas, r_agg)
    y_supp = aggregate_topk(out.attention.unsqueeze(1) * out.cas, r_agg)
    return VideoScores(y_base=y_base, y_supp=y_supp)


def extended_labels(label: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    y_base = [y, 1] and y_supp = [y, 0], each normalized to unit sum.
    """
    y = torch.as_tensor(np.asarray(label, dtype=np.float64))
    if y.sum() <= 0:
        raise ValueError("label has no action class; every training video needs at least one")
    y_base = torch.cat([y, torch.ones(1, dtype=DTYPE)])
    y_supp = torch.cat([y, torch.zeros(1, dtype=DTYPE)])
    return y_base / y_base.sum(), y_supp / y_supp.sum()


def classification_loss(out: ForwardOutput, label: np.ndarray, r_agg: int) -> torch.Tensor:
    y_base, y_supp = extended_labels(label)
    scores = video_scores(out, r_agg)
    ce_base = -(y_base * torch.log(scores.y_base.clamp_min(LOG_CLAMP))).sum()
    ce_supp = -(y_supp * torch.log(scores.y_supp.clamp_min(LOG_CLAMP))).sum()
    return ce_base + ce_supp


def batch_loss(
    params: WtalModel,
    batch: Sequence[VideoRecord],
    cfg: TrainConfig,
    dropout_on: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    if not batch:
        raise ValueError("batch must not be empty")
    losses = [
        classification_loss(forward(params, v.features, dropout_on, generator), v.label, cfg.topk_ratio) for v in batch
    ]
    return torch.stack(losses).mean()


def gradients(params: WtalModel, batch: Sequence[VideoRecord], cfg: TrainConfig) -> Dict[str, np.ndarray]:
    """
    Analytic gradient of the mean classification loss over batch (dropout off), keyed by
    parameter name. Top-k is a fixed selection at the current point.
    """
    params.zero_grad(set_to_none=True)
    loss = batch_loss(params, batch, cfg)
    loss.backward()
    return collect_gradients(params)


def collect_gradients(params: WtalModel) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}
    for name, p in params.ordered_parameters():
        g = np.zeros(tuple(p.shape)) if p.grad is None else p.grad.detach().cpu().numpy().copy()
        if not np.all(np.isfinite(g)):
            raise GradientError(name)
        grads[name] = g
    return grads


class BaseTrainer:
    """
    Stage-1 MIL training on a labelled source split.

    Example:
        >>> trainer = BaseTrainer(cfg)
        >>> model = trainer.train(source_train)
        >>> trainer.history  # per-epoch mean loss
    """

    def __init__(self, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.history = pd.DataFrame(columns=["epoch", "loss"])

    def init_model(self, ds: Dataset) -> WtalModel:
        model = WtalModel(ds.feature_dim, ds.num_classes, self.cfg.hidden_dim, self.cfg.dropout)
        model.reset_parameters(self.cfg.seed, "train-base-init")
        return model

    def epoch_loss(self, model: WtalModel, ds: Dataset) -> float:
        """
        Mean loss over the whole split with dropout off.
        """
        with torch.no_grad():
            return float(batch_loss(model, ds.videos, self.cfg).item())

    def train(self, ds: Dataset) -> WtalModel:
        if ds.split != "train":
            raise ValueError(f"train_base expects a train split, got {ds.name}")
        model = self.init_model(ds)
        records = [{"epoch": 0, "loss": self.epoch_loss(model, ds)}]
        logging.info(f"train-base epoch 0 loss {records[0]['loss']:.6f}")
        self.history = TalCommon.to_dataframe(records, columns=["epoch", "loss"])
        if self.cfg.epochs == 0:
            return model
        optimizer = torch.optim.Adam(model.parameters(), lr=self.cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        order_rng = TalCommon.stage_rng(self.cfg.seed, "train-base-shuffle")
        dropout_gen = TalCommon.torch_generator(self.cfg.seed, "train-base-dropout")

        videos = list(ds.videos)
        for epoch in range(1, self.cfg.epochs + 1):
            order = order_rng.permutation(len(videos))
            batch_losses = []
            for indices in TalCommon.split_list(order.tolist(), self.cfg.batch_size):
                batch = [videos[i] for i in indices]
                optimizer.zero_grad(set_to_none=True)
                loss = batch_loss(model, batch, self.cfg, dropout_on=True, generator=dropout_gen)
                loss.backward()
                collect_gradients(model)
                optimizer.step()
                batch_losses.append(float(loss.item()) * len(batch))
            mean_loss = sum(batch_losses) / len(videos)
            records.append({"epoch": epoch, "loss": mean_loss})
            logging.info(f"train-base epoch {epoch} loss {mean_loss:.6f}")
        self.history = TalCommon.to_dataframe(records, columns=["epoch", "loss"])
        return model


def train_base(ds: Dataset, cfg: TrainConfig) -> WtalModel:
    return BaseTrainer(cfg).train(ds)
