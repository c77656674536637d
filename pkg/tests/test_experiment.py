import asyncio
import argparse
import json
import os
import pytest
from pydantic import ValidationError
from conftest import small_experiment
from tal_scale_wizard import TalRootDirectory
from tal_scale_wizard.database.store_utils import ArtifactName, DatasetStore, ReportStore
from tal_scale_wizard.runner.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, alpha_list, main
from tal_scale_wizard.runner.experiment import ExperimentConfig, ExperimentRunner


def _runner(out, **overrides):
    return ExperimentRunner(ExperimentConfig.model_validate(small_experiment(**overrides)), str(out))


def test_scenarios_fill_defaults():
    up = ExperimentConfig.model_validate(small_experiment())
    assert (up.source, up.target) == ("short", "long")
    assert (up.refine.eta, up.refine.alpha) == (5, 0.1)
    assert up.threshold_preset.value == "long_regime"
    down = ExperimentConfig.model_validate(small_experiment(scenario="scale_down"))
    assert (down.source, down.target) == ("long", "short")
    assert (down.refine.eta, down.refine.alpha) == (3, 1.4)
    assert down.alpha_list[0] == 1.0 and down.alpha_list[-1] == 1.7
    explicit = ExperimentConfig.model_validate(small_experiment(refine={"eta": 2, "alpha": 0.3}))
    assert explicit.refine.eta == 2


def test_reference_config_loads():
    cfg = ExperimentConfig.load(
        os.path.join(TalRootDirectory.root_dir(), "tal_scale_wizard", "runner", "reference_config.json")
    )
    long_cfg = cfg.synth_config("long", "test")
    assert (long_cfg.sustain_level, long_cfg.salient_span) == (0.5, 2.0)
    assert cfg.adapt.calibration_target.value == "complement"
    assert (cfg.refine.eta, cfg.refine.alpha) == (5, 0.1)


def test_seed_propagates_to_every_stage():
    cfg = ExperimentConfig.model_validate(small_experiment()).override(seed=7)
    assert cfg.train.seed == 7 and cfg.adapt.seed == 7
    assert cfg.synth_config("long", "test").seed == 7


def test_invalid_configs_rejected():
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(small_experiment(source="long"))
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(small_experiment(scenario="sideways"))
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(small_experiment(train={"topk_ratio": 0}))


def test_gen_data_is_deterministic(tmp_path):
    a, b = _runner(tmp_path / "a"), _runner(tmp_path / "b")
    written = asyncio.run(a.cmd_gen_data())
    asyncio.run(b.cmd_gen_data())
    assert sorted(written) == ["long-test", "long-train", "short-test", "short-train"]
    for name in written:
        manifest = os.path.join(ArtifactName.DATA, name, ArtifactName.MANIFEST)
        assert (tmp_path / "a" / manifest).read_bytes() == (tmp_path / "b" / manifest).read_bytes()
        assert DatasetStore.load(written[name]).videos
    assert (tmp_path / "a" / ArtifactName.DURATION_STATS).exists()
    assert (tmp_path / "a" / ArtifactName.RESOLVED_CONFIG).exists()


def test_include_medium_adds_distribution(tmp_path):
    runner = _runner(tmp_path, include_medium=True)
    assert "medium-train" in asyncio.run(runner.cmd_gen_data())


def test_consuming_verbs_need_artifacts(tmp_path):
    runner = _runner(tmp_path)
    with pytest.raises(FileNotFoundError):
        asyncio.run(runner.cmd_train_base())
    with pytest.raises(FileNotFoundError):
        asyncio.run(runner.cmd_evaluate("base", "target-test"))


def test_protocol_outputs(protocol_out):
    out, table = protocol_out
    assert list(table["setting"]) == ["base-SmD", "base-CrD", "STAT-CrD"]
    assert list(table["dataset"]) == ["long-test", "long-test", "long-test"]
    assert "avg_mAP" in table.columns and "mAP@0.5" in table.columns
    for name in (
        ArtifactName.BASE_CHECKPOINT,
        ArtifactName.TEACHER_CHECKPOINT,
        ArtifactName.SMD_CHECKPOINT,
        ArtifactName.SMD_TRAIN_LOSS,
        ArtifactName.TRAIN_LOSS,
        ArtifactName.ADAPT_LOSS,
        ArtifactName.PROTOCOL_CSV,
        ArtifactName.PROTOCOL_TEXT,
        ArtifactName.SUMMARY_XLSX,
    ):
        assert os.path.exists(os.path.join(out, name)), name
    for tag in ("base-SmD", "base-CrD", "STAT-CrD"):
        report = ReportStore.read_json(os.path.join(out, ArtifactName.EVAL, tag, ArtifactName.REPORT_JSON))
        assert 0.0 <= report["average_map"] <= 1.0
        diag = ReportStore.read_json(os.path.join(out, ArtifactName.DIAGNOSE, tag, ArtifactName.DIAGNOSTICS_JSON))
        assert sum(diag["error_counts"].values()) == len(
            ReportStore.read_json(os.path.join(out, ArtifactName.EVAL, tag, ArtifactName.PREDICTIONS))
        )


def test_protocol_reports_are_byte_identical(tmp_path, protocol_out):
    out, _ = protocol_out
    asyncio.run(_runner(tmp_path).cmd_protocol())
    for name in (
        ArtifactName.PROTOCOL_CSV,
        ArtifactName.TRAIN_LOSS,
        ArtifactName.ADAPT_LOSS,
        os.path.join(ArtifactName.EVAL, "STAT-CrD", ArtifactName.REPORT_JSON),
        os.path.join(ArtifactName.DIAGNOSE, "base-CrD", ArtifactName.ATTENTION_BINS),
        ArtifactName.SUMMARY_XLSX,
    ):
        with open(os.path.join(out, name), "rb") as a, open(tmp_path / name, "rb") as b:
            assert a.read() == b.read(), name


def test_zero_loss_weights_make_adaptation_a_no_op(tmp_path):
    runner = _runner(tmp_path, adapt={"lambda_att": 0.0, "lambda_cas": 0.0, "lambda_cal": 0.0, "epochs": 1, "batch_size": 4})
    table = asyncio.run(runner.cmd_protocol()).set_index("setting")
    assert table.loc["STAT-CrD", "avg_mAP"] == table.loc["base-CrD", "avg_mAP"]


def test_ablations(tmp_path):
    runner = _runner(tmp_path)
    alpha = asyncio.run(runner.cmd_ablate_alpha([0.0, 0.5]))
    assert list(alpha["alpha"]) == [0.0, 0.5]
    losses = asyncio.run(runner.cmd_ablate_losses())
    assert len(losses) == 16
    assert set(losses["teacher"]) == {"ema", "frozen"}
    assert losses["base_crd_avg_mAP"].nunique() == 1
    assert (tmp_path / ArtifactName.ABLATE_ALPHA).exists() and (tmp_path / ArtifactName.ABLATE_LOSSES).exists()


def test_cli_exit_codes(tmp_path, small_config_file):
    out = str(tmp_path / "out")
    assert main(["gen-data", "--config", small_config_file, "--out", out]) == EXIT_OK
    assert main(["evaluate", "--config", small_config_file, "--out", out, "--checkpoint", "base"]) == EXIT_USAGE
    assert main(["train-base", "--config", small_config_file, "--out", out, "--seed", "0"]) == EXIT_OK
    assert main(["evaluate", "--config", small_config_file, "--out", out, "--checkpoint", "base"]) == EXIT_OK
    assert os.path.exists(os.path.join(out, ArtifactName.EVAL, "base-long-test", ArtifactName.REPORT_JSON))
    assert main(["diagnose", "--config", small_config_file, "--out", out, "--checkpoint", "base", "--iou", "0.3"]) == EXIT_OK
    assert main(["fly", "--out", out]) == EXIT_USAGE
    assert main(["ablate-alpha", "--out", out, "--alphas", "x"]) == EXIT_USAGE
    assert main(["ablate-alpha", "--out", out, "--alphas", "0.1,,0.2"]) == EXIT_USAGE

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(small_experiment(target="short")))
    assert main(["gen-data", "--config", str(bad), "--out", out]) == EXIT_USAGE

    corrupt = os.path.join(out, ArtifactName.BASE_CHECKPOINT)
    with open(corrupt, "wb") as f:
        f.write(b"GTCK\x00")
    assert main(["evaluate", "--config", small_config_file, "--out", out, "--checkpoint", "base"]) == EXIT_RUNTIME


def test_alpha_list_parsing():
    assert alpha_list("0,0.1,1.4") == [0.0, 0.1, 1.4]
    with pytest.raises(argparse.ArgumentTypeError):
        alpha_list("0.1,x")
