"""
Stage-2 self-supervised temporal adaptive teacher.

Teacher and student start from the base model. On unlabelled target videos the teacher's
attention is refined against its salient temporal context, the student is aligned to the
teacher (attention MSE, CAS KL, background calibration) and the teacher follows the student
by EMA. The teacher is the model used for inference.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
import pandas as pd
import torch
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, model_validator
from tal_scale_wizard.src.common import AdaptationError, TalCommon
from tal_scale_wizard.src.snippet_data import Dataset, FeatureSequence, VideoRecord
from tal_scale_wizard.src.wtal_model import DTYPE, LOG_CLAMP, WtalModel, as_tensor, collect_gradients

ArrayLike = Union[np.ndarray, torch.Tensor]


class CalibrationTarget(str, Enum):
    """
    AS_PRINTED: background probability is pulled toward the attention value.
    COMPLEMENT: background probability is pulled toward one minus the attention value.
    """

    AS_PRINTED = "as_printed"
    COMPLEMENT = "complement"

    @classmethod
    def list(cls):
        return [member.value for member in cls.__members__.values()]


class RefineConfig(BaseModel):
    eta: int
    alpha: float
    clamp: bool = True

    @model_validator(mode="after")
    def _check(self) -> "RefineConfig":
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        return self


class AdaptConfig(BaseModel):
    lambda_att: float = 1.0
    lambda_cas: float = 1.0
    lambda_cal: float = 0.1
    ema_momentum: float = 0.9
    ema_enabled: bool = True
    epochs: int = 50
    batch_size: int = 30
    learning_rate: float = 3e-5
    blur_sigma: float = 1.0
    blur_kernel: int = 3
    student_dropout: float = 0.1
    calibration_target: CalibrationTarget = CalibrationTarget.AS_PRINTED
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "AdaptConfig":
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must be in [0, 1]")
        for name in ("lambda_att", "lambda_cas", "lambda_cal"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd number")
        if not 0 <= self.student_dropout < 1:
            raise ValueError("student_dropout must be in [0, 1)")
        return self


@dataclass
class TeacherStudent:
    teacher: WtalModel
    student: WtalModel

    def __post_init__(self) -> None:
        t_shapes = [tuple(p.shape) for _, p in self.teacher.ordered_parameters()]
        s_shapes = [tuple(p.shape) for _, p in self.student.ordered_parameters()]
        if t_shapes != s_shapes:
            raise ValueError(f"teacher/student shapes differ: {t_shapes} vs {s_shapes}")

    @classmethod
    def from_base(cls, base: WtalModel, student_dropout: float = 0.1) -> "TeacherStudent":
        teacher = base.clone()
        student = base.clone()
        student.dropout = student_dropout
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(teacher=teacher, student=student)


def gaussian_kernel(sigma: float, width: int) -> np.ndarray:
    radius = width // 2
    if sigma == 0:
        kernel = np.zeros(width)
        kernel[radius] = 1.0
        return kernel
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def blur_augment(feats: FeatureSequence, cfg: AdaptConfig) -> FeatureSequence:
    """
    Per-channel temporal Gaussian blur with edge-replicated padding.
    """
    kernel = gaussian_kernel(cfg.blur_sigma, cfg.blur_kernel)
    radius = cfg.blur_kernel // 2
    data = np.asarray(feats.data, dtype=np.float64)
    padded = np.pad(data, ((radius, radius), (0, 0)), mode="edge")
    n = data.shape[0]
    blurred = sum(w * padded[i : i + n] for i, w in enumerate(kernel))
    return FeatureSequence(data=blurred, snippet_stride=feats.snippet_stride)


def salience_windows(phi: np.ndarray, eta: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Max attention of the left window [n - eta, n - 1] and right window [n + 1, n + eta];
    a window with no valid index yields phi(n).
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = len(phi)
    pad = np.full(eta, -np.inf)
    windows = sliding_window_view(np.concatenate([pad, phi, pad]), eta).max(axis=1)
    left = windows[:n]
    right = windows[eta + 1 : eta + 1 + n]
    left = np.where(np.isneginf(left), phi, left)
    right = np.where(np.isneginf(right), phi, right)
    return left, right


def salience_sample(phi: np.ndarray, n: int, eta: int) -> Tuple[float, float]:
    if not 0 <= n < len(phi):
        raise IndexError(f"snippet index {n} out of range for length {len(phi)}")
    left, right = salience_windows(phi, eta)
    return float(left[n]), float(right[n])


def refine_attention(phi_T: np.ndarray, cfg: RefineConfig) -> np.ndarray:
    """
    One simultaneous pass over the original attention: snippets below both salient
    neighbours move by alpha toward min(left max, right max); others stay.
    """
    phi = np.asarray(phi_T, dtype=np.float64)
    left, right = salience_windows(phi, cfg.eta)
    reference = np.minimum(left, right)
    refined = np.where(phi < reference, cfg.alpha * phi + (1.0 - cfg.alpha) * reference, phi)
    if cfg.clamp:
        refined = np.clip(refined, 0.0, 1.0)
    return refined


def _constant(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _student(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def loss_att(phi_hat_T: ArrayLike, phi_S: ArrayLike) -> torch.Tensor:
    target, pred = _constant(phi_hat_T), _student(phi_S)
    if target.shape != pred.shape:
        raise ValueError(f"attention length mismatch: {tuple(target.shape)} vs {tuple(pred.shape)}")
    return ((target - pred) ** 2).mean()


def loss_cas(psi_T: ArrayLike, psi_S: ArrayLike) -> torch.Tensor:
    """
    Mean per-snippet KL(teacher || student), 0 log 0 taken as 0.
    """
    target, pred = _constant(psi_T), _student(psi_S)
    if target.shape != pred.shape:
        raise ValueError(f"CAS shape mismatch: {tuple(target.shape)} vs {tuple(pred.shape)}")
    kl = torch.xlogy(target, target) - target * torch.log(pred.clamp_min(LOG_CLAMP))
    return kl.sum(dim=1).mean()


def loss_cal(
    phi_S: ArrayLike,
    psi_S: ArrayLike,
    target: CalibrationTarget = CalibrationTarget.AS_PRINTED,
) -> torch.Tensor:
    """
    Binary cross-entropy between the student's background probability (last CAS column)
    and its attention; differentiable in both.
    """
    phi, psi = _student(phi_S), _student(psi_S)
    if psi.ndim != 2 or phi.shape[0] != psi.shape[0]:
        raise ValueError(f"attention/CAS shape mismatch: {tuple(phi.shape)} vs {tuple(psi.shape)}")
    bg = psi[:, -1]
    goal = phi if CalibrationTarget(target) == CalibrationTarget.AS_PRINTED else 1.0 - phi
    bce = -goal * torch.log(bg.clamp_min(LOG_CLAMP)) - (1.0 - goal) * torch.log((1.0 - bg).clamp_min(LOG_CLAMP))
    return bce.mean()


def adapt_loss_components(
    phi_hat_T: ArrayLike,
    psi_T: ArrayLike,
    phi_S: ArrayLike,
    psi_S: ArrayLike,
    cfg: AdaptConfig,
) -> Dict[str, torch.Tensor]:
    """
    Lambda-weighted components and their sum.
    """
    att = cfg.lambda_att * loss_att(phi_hat_T, phi_S)
    cas = cfg.lambda_cas * loss_cas(psi_T, psi_S)
    cal = cfg.lambda_cal * loss_cal(phi_S, psi_S, cfg.calibration_target)
    return {"L_att": att, "L_cas": cas, "L_cal": cal, "total": att + cas + cal}


def total_adapt_loss(
    phi_hat_T: ArrayLike,
    psi_T: ArrayLike,
    phi_S: ArrayLike,
    psi_S: ArrayLike,
    cfg: AdaptConfig,
) -> torch.Tensor:
    return adapt_loss_components(phi_hat_T, psi_T, phi_S, psi_S, cfg)["total"]


def ema_update(ts: TeacherStudent, m: float) -> TeacherStudent:
    """
    teacher <- m * teacher + (1 - m) * student, elementwise; the student is untouched.
    """
    if not 0 <= m <= 1:
        raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
    student = dict(ts.student.ordered_parameters())
    with torch.no_grad():
        for name, p_t in ts.teacher.ordered_parameters():
            p_s = student[name]
            if p_t.shape != p_s.shape:
                raise ValueError(f"{name}: teacher shape {tuple(p_t.shape)} != student shape {tuple(p_s.shape)}")
            if m == 1:
                continue
            if m == 0:
                p_t.copy_(p_s)
                continue
            p_t.lerp_(p_s, 1.0 - m)
    return ts


class StatAdapter:
    """
    Stage-2 teacher-student adaptation on an unlabelled target split.

    Example:
        >>> adapter = StatAdapter(RefineConfig(eta=5, alpha=0.1), AdaptConfig(epochs=20))
        >>> teacher = adapter.adapt(base, target_train)
        >>> adapter.history  # epoch, L_att, L_cas, L_cal, total
    """

    COLUMNS = ["epoch", "L_att", "L_cas", "L_cal", "total"]

    def __init__(self, refine_cfg: RefineConfig, adapt_cfg: AdaptConfig) -> None:
        self.refine_cfg = refine_cfg
        self.adapt_cfg = adapt_cfg
        self.history = pd.DataFrame(columns=self.COLUMNS)
        self.ts: Optional[TeacherStudent] = None

    def inference_model(self) -> WtalModel:
        """
        The EMA teacher; with EMA disabled the teacher stays frozen and the student is evaluated.
        """
        if self.ts is None:
            raise ValueError("Please run adapt() first!")
        return self.ts.teacher if self.adapt_cfg.ema_enabled else self.ts.student

    def teacher_targets(self, teacher: WtalModel, video: VideoRecord) -> Tuple[np.ndarray, torch.Tensor]:
        """
        Refined teacher attention and raw teacher CAS, both constants.
        """
        with torch.no_grad():
            out = teacher(as_tensor(video.features), dropout_on=False)
        phi_hat = refine_attention(out.attention.numpy(), self.refine_cfg)
        return phi_hat, out.cas

    def batch_components(
        self,
        ts: TeacherStudent,
        batch: Sequence[VideoRecord],
        blurred: Dict[str, FeatureSequence],
        dropout_on: bool = True,
        generator: Optional[torch.Generator] = None,
    ) -> Dict[str, torch.Tensor]:
        """
        Mean over the batch of each weighted loss component.
        """
        parts: List[Dict[str, torch.Tensor]] = []
        for video in batch:
            phi_hat, psi_T = self.teacher_targets(ts.teacher, video)
            feats = blurred.get(video.id) or blur_augment(video.features, self.adapt_cfg)
            out_S = ts.student(as_tensor(feats), dropout_on=dropout_on, generator=generator)
            parts.append(adapt_loss_components(phi_hat, psi_T, out_S.attention, out_S.cas, self.adapt_cfg))
        return {key: torch.stack([p[key] for p in parts]).mean() for key in parts[0]}

    def student_gradients(self, ts: TeacherStudent, batch: Sequence[VideoRecord]) -> Dict[str, np.ndarray]:
        """
        Analytic gradient of the total loss w.r.t. the student, dropout off.
        """
        if not batch:
            raise ValueError("batch must not be empty")
        ts.student.zero_grad(set_to_none=True)
        loss = self.batch_components(ts, batch, {}, dropout_on=False)["total"]
        loss.backward()
        return collect_gradients(ts.student)

    def adapt(self, base: WtalModel, target_train: Dataset) -> WtalModel:
        """
        Video-level labels of target_train are never read.
        """
        cfg = self.adapt_cfg
        ts = TeacherStudent.from_base(base, cfg.student_dropout)
        self.ts = ts
        records: List[dict] = []
        if cfg.epochs == 0 or not target_train.videos:
            self.history = TalCommon.to_dataframe(records, columns=self.COLUMNS)
            return ts.teacher

        videos = list(target_train.videos)
        blurred = {v.id: blur_augment(v.features, cfg) for v in videos}
        optimizer = torch.optim.Adam(ts.student.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        order_rng = TalCommon.stage_rng(cfg.seed, "adapt-shuffle")
        dropout_gen = TalCommon.torch_generator(cfg.seed, "adapt-dropout")

        for epoch in range(1, cfg.epochs + 1):
            order = order_rng.permutation(len(videos))
            sums = {key: 0.0 for key in self.COLUMNS[1:]}
            for batch_idx, indices in enumerate(TalCommon.split_list(order.tolist(), cfg.batch_size)):
                batch = [videos[i] for i in indices]
                optimizer.zero_grad(set_to_none=True)
                parts = self.batch_components(ts, batch, blurred, dropout_on=True, generator=dropout_gen)
                total = parts["total"]
                if not torch.isfinite(total):
                    raise AdaptationError(epoch, batch_idx, float(total.item()))
                total.backward()
                collect_gradients(ts.student)
                optimizer.step()
                if cfg.ema_enabled:
                    ema_update(ts, cfg.ema_momentum)
                for key in sums:
                    sums[key] += float(parts[key].item()) * len(batch)
            row = {"epoch": epoch, **{key: value / len(videos) for key, value in sums.items()}}
            records.append(row)
            logging.info(
                f"adapt epoch {epoch} L_att {row['L_att']:.6f} L_cas {row['L_cas']:.6f} "
                f"L_cal {row['L_cal']:.6f} total {row['total']:.6f}"
            )
        self.history = TalCommon.to_dataframe(records, columns=self.COLUMNS)
        return ts.teacher


def adapt(
    base: WtalModel,
    target_train: Dataset,
    refine_cfg: RefineConfig,
    adapt_cfg: AdaptConfig,
) -> WtalModel:
    return StatAdapter(refine_cfg, adapt_cfg).adapt(base, target_train)
