import asyncio
import json
import numpy as np
import pytest
import torch
from tal_scale_wizard.runner.experiment import ExperimentConfig, ExperimentRunner
from tal_scale_wizard.src.snippet_data import (
    FeatureSequence,
    GroundTruthInstance,
    SynthConfig,
    VideoRecord,
    generate_synthetic_dataset,
)
from tal_scale_wizard.src.wtal_model import WtalModel, as_tensor, topk_count

TINY_CLASSES = 3
TINY_DIM = 8


def tiny_synth(split: str = "train", **overrides) -> SynthConfig:
    values = dict(
        distribution_id="short",
        split=split,
        num_classes=TINY_CLASSES,
        feature_dim=TINY_DIM,
        videos_per_split=6,
        snippet_stride=1.0,
        duration_median=4.0,
        video_length_range=(16.0, 24.0),
        instances_per_video_range=(1, 2),
        seed=0,
    )
    values.update(overrides)
    return SynthConfig(**values)


def small_experiment(**overrides) -> dict:
    data = {
        "scenario": "scale_up",
        "synth": {"num_classes": TINY_CLASSES, "feature_dim": TINY_DIM, "videos_per_split": 4},
        "train": {"learning_rate": 0.01, "batch_size": 4, "epochs": 2, "hidden_dim": 8},
        "adapt": {"learning_rate": 0.001, "batch_size": 4, "epochs": 1},
        "seed": 0,
        "workers": 2,
    }
    data.update(overrides)
    return data


@pytest.fixture
def tiny_train():
    return generate_synthetic_dataset(tiny_synth("train"))


@pytest.fixture
def tiny_test():
    return generate_synthetic_dataset(tiny_synth("test"))


@pytest.fixture
def tiny_model():
    model = WtalModel(feature_dim=TINY_DIM, num_classes=TINY_CLASSES, hidden_dim=8)
    model.reset_parameters(seed=0)
    return model


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(small_experiment()))
    return str(path)


@pytest.fixture(scope="session")
def protocol_out(tmp_path_factory):
    """
    One small protocol run shared by the runner and viewer tests.
    """
    out = tmp_path_factory.mktemp("protocol")
    runner = ExperimentRunner(ExperimentConfig.model_validate(small_experiment()), str(out))
    table = asyncio.run(runner.cmd_protocol())
    return str(out), table


def random_video(rng, num_snippets: int, feature_dim: int, num_classes: int, video_id: str = "v"):
    """
    Random features with one unit-length instance per present class.
    """
    count = int(rng.integers(1, min(num_classes, num_snippets) + 1))
    classes = sorted(rng.choice(num_classes, size=count, replace=False).tolist())
    instances = tuple(GroundTruthInstance(c, float(j), float(j) + 1.0) for j, c in enumerate(classes))
    label = np.zeros(num_classes, dtype=np.int8)
    label[classes] = 1
    data = rng.standard_normal((num_snippets, feature_dim)).astype(np.float32)
    return VideoRecord(
        id=video_id,
        features=FeatureSequence(data, 1.0),
        label=label,
        instances=instances,
        duration=float(num_snippets),
    )


def kink_pattern(model, videos, topk_ratio=None):
    """
    ReLU sign pattern and top-k selections; a finite difference is only valid when the
    pattern is the same on both sides of the step.
    """
    pattern = []
    with torch.no_grad():
        for video in videos:
            x = as_tensor(video.features).T.unsqueeze(0)
            pattern.append((model.embed(x) > 0).numpy().tobytes())
            if topk_ratio is not None:
                out = model(as_tensor(video.features))
                k = topk_count(video.features.num_snippets, topk_ratio)
                for scores in (out.cas, out.attention.unsqueeze(1) * out.cas):
                    idx = torch.topk(scores, k, dim=0).indices.sort(dim=0).values
                    pattern.append(idx.numpy().tobytes())
    return pattern


def central_difference(loss_fn, model, name, index, h=1e-4, pattern_fn=None):
    """
    (L(p + h) - L(p - h)) / 2h for one parameter entry, or None across a kink.
    """
    param = dict(model.named_parameters())[name]
    with torch.no_grad():
        original = param[index].item()
        param[index] = original + h
        plus = float(loss_fn())
        upper = pattern_fn() if pattern_fn else None
        param[index] = original - h
        minus = float(loss_fn())
        lower = pattern_fn() if pattern_fn else None
        param[index] = original
    if pattern_fn and (upper != lower or upper != pattern_fn()):
        return None
    return (plus - minus) / (2 * h)
