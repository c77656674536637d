"""
Full protocol of one experiment:
0. Generate source / target datasets
1. Train the base model on source-train
2. Adapt it on target-train (labels unused)
3. Train a same-distribution model on target-train (labels used)
4. Evaluate base-SmD, base-CrD and STAT-CrD on target-test
5. Diagnose, ablate

Every verb writes resolved_config.json and its artifacts under the output directory.
"""
import os
import json
import logging
from typing import Any, Dict, List, Optional, Tuple
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from tal_scale_wizard import TalRootDirectory
from tal_scale_wizard.analyzer.diagnostics import DiagnosticsReport, error_breakdown, snippet_diagnostics
from tal_scale_wizard.analyzer.evaluator import EvalReport, ThresholdPreset, evaluate_map, ground_truth_segments
from tal_scale_wizard.database.store_utils import ArtifactName, CheckpointStore, DatasetStore, ReportStore
from tal_scale_wizard.src.common import TalCommon, create_xlsx_file
from tal_scale_wizard.src.localizer import InferenceConfig, Localizer, Proposal, save_predictions
from tal_scale_wizard.src.snippet_data import (
    SYNTH_PRESETS,
    Dataset,
    SynthConfig,
    duration_statistics,
    generate_synthetic_dataset,
    synth_preset,
)
from tal_scale_wizard.src.stat_adapter import AdaptConfig, RefineConfig, StatAdapter
from tal_scale_wizard.src.wtal_model import BaseTrainer, TrainConfig, WtalModel

# Scale-up transfers short actions to long ones, scale-down the reverse
SCENARIOS: Dict[str, Dict[str, Any]] = {
    "scale_up": {
        "source": "short",
        "target": "long",
        "refine": {"eta": 5, "alpha": 0.1},
        "threshold_preset": ThresholdPreset.LONG_REGIME.value,
        "alpha_list": [round(0.1 * i, 2) for i in range(11)],
    },
    "scale_down": {
        "source": "long",
        "target": "short",
        "refine": {"eta": 3, "alpha": 1.4},
        "threshold_preset": ThresholdPreset.SHORT_REGIME.value,
        "alpha_list": [round(1.0 + 0.1 * i, 2) for i in range(8)],
    },
}

SMD, CRD, STAT_CRD = "base-SmD", "base-CrD", "STAT-CrD"


def _env_int(key: str, default: int) -> int:
    return int(TalRootDirectory.env().get(key, default))


class ExperimentConfig(BaseModel):
    """
    One experiment file. A scenario fills source, target, refine, threshold_preset and
    alpha_list unless the file sets them.

    Example:
        >>> cfg = ExperimentConfig.load("tal_scale_wizard/runner/reference_config.json")
        >>> cfg = cfg.override(seed=3)
    """

    scenario: str = "scale_up"
    source: str
    target: str
    synth: Dict[str, Any] = Field(default_factory=dict)
    train: TrainConfig = Field(default_factory=TrainConfig)
    refine: RefineConfig
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    threshold_preset: ThresholdPreset
    alpha_list: List[float]
    diagnose_iou: float = 0.5
    include_medium: bool = False
    seed: int = Field(default_factory=lambda: _env_int("TAL_SEED", 0))
    workers: int = Field(default_factory=lambda: _env_int("TAL_WORKERS", 8))

    @model_validator(mode="before")
    @classmethod
    def _apply_scenario(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        name = data.get("scenario", "scale_up")
        if name not in SCENARIOS:
            raise ValueError(f"Unknown scenario: {name}, expected one of {sorted(SCENARIOS)}")
        for key, value in SCENARIOS[name].items():
            data.setdefault(key, value)
        return data

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        for role in ("source", "target"):
            if getattr(self, role) not in SYNTH_PRESETS:
                raise ValueError(f"Unknown {role} preset: {getattr(self, role)}")
        if self.source == self.target:
            raise ValueError("source and target presets must differ")
        if not self.alpha_list:
            raise ValueError("alpha_list must not be empty")
        if not 0 < self.diagnose_iou <= 1:
            raise ValueError("diagnose_iou must be in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        # one seed drives every stage
        self.train.seed = self.seed
        self.adapt.seed = self.seed
        for dist in self.distributions():
            self.synth_config(dist, "train")
        return self

    @staticmethod
    def load(path: str) -> "ExperimentConfig":
        with open(path, "r") as f:
            return ExperimentConfig.model_validate(json.load(f))

    def override(self, **updates: Any) -> "ExperimentConfig":
        """
        Re-validated copy, e.g. cfg.override(seed=7).
        """
        return ExperimentConfig.model_validate({**self.model_dump(mode="json"), **updates})

    def distributions(self) -> List[str]:
        dists = [self.source, self.target]
        if self.include_medium and "medium" not in dists:
            dists.append("medium")
        return dists

    def synth_config(self, distribution_id: str, split: str) -> SynthConfig:
        return synth_preset(distribution_id, **{**self.synth, "split": split, "seed": self.seed})

    def thresholds(self) -> List[float]:
        return self.threshold_preset.thresholds()


class ExperimentRunner:
    """
    Run the verbs of one experiment against an output directory.

    Example:
        runner = ExperimentRunner(cfg, "/tmp/out")
        await runner.cmd_protocol()
    """

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[str] = None) -> None:
        self.cfg = cfg
        self.out_dir = out_dir or TalRootDirectory.env().get(
            "TAL_OUT_DIR", os.path.join(TalRootDirectory.root_dir(), "out")
        )
        self.to_save: Dict[str, pd.DataFrame] = {}

    # ---------- paths ----------

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def dataset_name(self, role: str) -> str:
        """
        Args:
            role: source-train, source-test, target-train, target-test or <preset>-<split>
        """
        dist, split = role.rsplit("-", 1)
        dist = {"source": self.cfg.source, "target": self.cfg.target}.get(dist, dist)
        return f"{dist}-{split}"

    def write_resolved_config(self) -> str:
        path = self.path(ArtifactName.RESOLVED_CONFIG)
        ReportStore.write_text(path, self.cfg.model_dump_json(indent=2) + "\n")
        return path

    def load_dataset(self, role: str) -> Dataset:
        dist, split = self.dataset_name(role).rsplit("-", 1)
        directory = ArtifactName.dataset_dir(self.out_dir, dist, split)
        if not os.path.exists(os.path.join(directory, ArtifactName.MANIFEST)):
            raise FileNotFoundError(f"Dataset {dist}-{split} not found at {directory}; run gen-data first")
        return DatasetStore.load(directory)

    def load_checkpoint(self, checkpoint: str) -> WtalModel:
        """
        Args:
            checkpoint: base, teacher, smd, or a checkpoint file path
        """
        names = {
            "base": ArtifactName.BASE_CHECKPOINT,
            "teacher": ArtifactName.TEACHER_CHECKPOINT,
            "smd": ArtifactName.SMD_CHECKPOINT,
        }
        path = self.path(names[checkpoint]) if checkpoint in names else checkpoint
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint {checkpoint} not found at {path}")
        return CheckpointStore.load(path)

    # ---------- verbs ----------

    async def cmd_gen_data(self) -> Dict[str, str]:
        self.write_resolved_config()
        logging.info(f"gen-data: {self.cfg.distributions()} -> {self.out_dir}")
        written: Dict[str, str] = {}
        datasets: List[Dataset] = []
        for dist in self.cfg.distributions():
            for split in ("train", "test"):
                ds = generate_synthetic_dataset(self.cfg.synth_config(dist, split))
                if not ds.videos:
                    raise ValueError(f"{ds.name} has no videos; raise videos_per_split")
                directory = ArtifactName.dataset_dir(self.out_dir, dist, split)
                written[ds.name] = DatasetStore.save(ds, directory)
                datasets.append(ds)
        stats = duration_statistics(datasets)
        ReportStore.write_csv(self.path(ArtifactName.DURATION_STATS), stats)
        self.to_save["durations"] = stats
        print(TalCommon.render_table(stats[stats["class"] == "all"]), end="")
        return written

    async def cmd_train_base(self) -> str:
        self.write_resolved_config()
        ds = self.load_dataset("source-train")
        logging.info(f"train-base on {ds.name} ({len(ds.videos)} videos)")
        trainer = BaseTrainer(self.cfg.train)
        model = trainer.train(ds)
        ReportStore.write_csv(self.path(ArtifactName.TRAIN_LOSS), trainer.history)
        self.to_save["train_loss"] = trainer.history
        return CheckpointStore.save(model, self.path(ArtifactName.BASE_CHECKPOINT))

    async def train_smd(self) -> str:
        """
        Same-distribution reference: the base recipe trained on target-train with its labels.
        """
        ds = self.load_dataset("target-train")
        logging.info(f"train same-distribution model on {ds.name} ({len(ds.videos)} videos)")
        trainer = BaseTrainer(self.cfg.train)
        model = trainer.train(ds)
        ReportStore.write_csv(self.path(ArtifactName.SMD_TRAIN_LOSS), trainer.history)
        self.to_save["smd_train_loss"] = trainer.history
        return CheckpointStore.save(model, self.path(ArtifactName.SMD_CHECKPOINT))

    def _adapt(
        self, base: WtalModel, target_train: Dataset, adapt_cfg: AdaptConfig, refine_cfg: RefineConfig
    ) -> Tuple[WtalModel, pd.DataFrame]:
        adapter = StatAdapter(refine_cfg, adapt_cfg)
        adapter.adapt(base, target_train)
        return adapter.inference_model(), adapter.history

    async def cmd_adapt(self) -> str:
        self.write_resolved_config()
        base = self.load_checkpoint("base")
        ds = self.load_dataset("target-train")
        logging.info(f"adapt on {ds.name} (eta {self.cfg.refine.eta}, alpha {self.cfg.refine.alpha})")
        model, history = self._adapt(base, ds, self.cfg.adapt, self.cfg.refine)
        ReportStore.write_csv(self.path(ArtifactName.ADAPT_LOSS), history)
        self.to_save["adapt_loss"] = history
        return CheckpointStore.save(model, self.path(ArtifactName.TEACHER_CHECKPOINT))

    async def predict(self, model: WtalModel, ds: Dataset) -> List[Proposal]:
        return await Localizer(model, self.cfg.inference, self.cfg.workers).localize_all(ds)

    async def evaluate_model(self, model: WtalModel, ds: Dataset, tag: str, write: bool = True) -> EvalReport:
        preds = await self.predict(model, ds)
        report = evaluate_map(preds, ground_truth_segments(ds), self.cfg.thresholds(), tag=tag)
        logging.info(f"{tag}: average mAP {report.average_map:.4f} over {ds.name}")
        if write:
            directory = self.path(ArtifactName.EVAL, tag)
            save_predictions(os.path.join(directory, ArtifactName.PREDICTIONS), preds)
            ReportStore.write_json(os.path.join(directory, ArtifactName.REPORT_JSON), report.to_dict())
            ReportStore.write_text(os.path.join(directory, ArtifactName.REPORT_TEXT), report.to_text())
            ReportStore.write_csv(os.path.join(directory, ArtifactName.MAP_CSV), report.to_frame())
        return report

    async def cmd_evaluate(
        self, checkpoint: str = "teacher", dataset: str = "target-test", tag: Optional[str] = None
    ) -> EvalReport:
        self.write_resolved_config()
        model = self.load_checkpoint(checkpoint)
        ds = self.load_dataset(dataset)
        report = await self.evaluate_model(model, ds, tag or f"{checkpoint}-{ds.name}")
        print(report.to_text(), end="")
        return report

    async def diagnose_model(self, model: WtalModel, ds: Dataset, tag: str) -> DiagnosticsReport:
        report = snippet_diagnostics(model, ds, self.cfg.inference.topk_ratio, tag=tag)
        preds = await self.predict(model, ds)
        counts = error_breakdown(preds, ground_truth_segments(ds), self.cfg.diagnose_iou)
        report = report.with_errors(counts, self.cfg.diagnose_iou)
        directory = self.path(ArtifactName.DIAGNOSE, tag)
        ReportStore.write_json(os.path.join(directory, ArtifactName.DIAGNOSTICS_JSON), report.to_dict())
        ReportStore.write_text(os.path.join(directory, ArtifactName.DIAGNOSTICS_TEXT), report.to_text())
        ReportStore.write_csv(os.path.join(directory, ArtifactName.ATTENTION_BINS), report.to_frame())
        return report

    async def cmd_diagnose(
        self, checkpoint: str = "teacher", dataset: str = "target-test", tag: Optional[str] = None
    ) -> DiagnosticsReport:
        self.write_resolved_config()
        model = self.load_checkpoint(checkpoint)
        ds = self.load_dataset(dataset)
        report = await self.diagnose_model(model, ds, tag or f"{checkpoint}-{ds.name}")
        print(report.to_text(), end="")
        return report

    def _map_row(self, report: EvalReport, **leading: Any) -> dict:
        row = dict(leading)
        for threshold, value in zip(report.thresholds, report.map_per_threshold):
            row[f"mAP@{threshold:g}"] = value
        row["avg_mAP"] = report.average_map
        return row

    async def _prepare(self) -> Tuple[WtalModel, Dataset, Dataset]:
        """
        Data and base model for the multi-stage verbs.
        """
        await self.cmd_gen_data()
        await self.cmd_train_base()
        return self.load_checkpoint("base"), self.load_dataset("target-train"), self.load_dataset("target-test")

    def save_summary(self) -> str:
        path = self.path(ArtifactName.SUMMARY_XLSX)
        create_xlsx_file(self.to_save, path)
        return path

    async def cmd_protocol(self) -> pd.DataFrame:
        """
        Rows base-SmD, base-CrD, STAT-CrD, all scored on target-test (plus the medium
        transfer when enabled). base-SmD is trained on target-train with its labels.
        """
        base, _, target_test = await self._prepare()
        await self.cmd_adapt()
        teacher = self.load_checkpoint("teacher")
        await self.train_smd()
        smd = self.load_checkpoint("smd")

        settings = [(SMD, smd, target_test), (CRD, base, target_test), (STAT_CRD, teacher, target_test)]
        if self.cfg.include_medium and "medium" not in (self.cfg.source, self.cfg.target):
            medium_test = self.load_dataset("medium-test")
            medium_teacher, _ = self._adapt(base, self.load_dataset("medium-train"), self.cfg.adapt, self.cfg.refine)
            settings += [(f"{CRD}-medium", base, medium_test), (f"{STAT_CRD}-medium", medium_teacher, medium_test)]

        rows = []
        for tag, model, ds in settings:
            report = await self.evaluate_model(model, ds, tag)
            await self.diagnose_model(model, ds, tag)
            rows.append(self._map_row(report, setting=tag, dataset=ds.name))
            self.to_save[f"eval_{tag}"] = report.to_frame()
        table = TalCommon.to_dataframe(rows)
        ReportStore.write_csv(self.path(ArtifactName.PROTOCOL_CSV), table)
        ReportStore.write_text(self.path(ArtifactName.PROTOCOL_TEXT), TalCommon.render_table(table))
        self.to_save["protocol"] = table
        self.save_summary()
        print(TalCommon.render_table(table), end="")
        return table

    async def cmd_ablate_alpha(self, alpha_list: Optional[List[float]] = None) -> pd.DataFrame:
        alphas = list(alpha_list) if alpha_list else list(self.cfg.alpha_list)
        base, target_train, target_test = await self._prepare()
        rows = []
        for alpha in alphas:
            refine = RefineConfig(eta=self.cfg.refine.eta, alpha=alpha, clamp=self.cfg.refine.clamp)
            logging.info(f"ablate-alpha: alpha {alpha}")
            model, _ = self._adapt(base, target_train, self.cfg.adapt, refine)
            report = await self.evaluate_model(model, target_test, f"alpha-{alpha:g}", write=False)
            rows.append(self._map_row(report, alpha=alpha))
        table = TalCommon.to_dataframe(rows)
        ReportStore.write_csv(self.path(ArtifactName.ABLATE_ALPHA), table)
        self.to_save["ablate_alpha"] = table
        self.save_summary()
        print(TalCommon.render_table(table), end="")
        return table

    async def cmd_ablate_losses(self) -> pd.DataFrame:
        """
        2^3 loss on/off grid, each with the EMA teacher and with a frozen teacher.
        """
        base, target_train, target_test = await self._prepare()
        reference = await self.evaluate_model(base, target_test, CRD, write=False)
        rows = []
        for ema in (True, False):
            for mask in range(8):
                att, cas, cal = bool(mask & 4), bool(mask & 2), bool(mask & 1)
                adapt_cfg = self.cfg.adapt.model_copy(
                    update={
                        "lambda_att": self.cfg.adapt.lambda_att if att else 0.0,
                        "lambda_cas": self.cfg.adapt.lambda_cas if cas else 0.0,
                        "lambda_cal": self.cfg.adapt.lambda_cal if cal else 0.0,
                        "ema_enabled": ema,
                    }
                )
                logging.info(f"ablate-losses: att={att} cas={cas} cal={cal} ema={ema}")
                model, _ = self._adapt(base, target_train, adapt_cfg, self.cfg.refine)
                report = await self.evaluate_model(model, target_test, "ablate", write=False)
                rows.append(
                    self._map_row(
                        report,
                        L_att=att,
                        L_cas=cas,
                        L_cal=cal,
                        teacher="ema" if ema else "frozen",
                        base_crd_avg_mAP=reference.average_map,
                    )
                )
        table = TalCommon.to_dataframe(rows)
        ReportStore.write_csv(self.path(ArtifactName.ABLATE_LOSSES), table)
        self.to_save["ablate_losses"] = table
        self.save_summary()
        print(TalCommon.render_table(table), end="")
        return table
