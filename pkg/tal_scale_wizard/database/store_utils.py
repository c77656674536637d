import os
import json
import logging
from typing import Any, List, Optional
import numpy as np
import pandas as pd
import torch
from tal_scale_wizard.src.common import StoreFormatError
from tal_scale_wizard.src.snippet_data import (
    Dataset,
    FeatureSequence,
    GroundTruthInstance,
    VideoRecord,
)
from tal_scale_wizard.src.wtal_model import DTYPE, WtalModel

FORMAT_VERSION = 1
FEATURE_MAGIC = b"GTF1"
# magic, N, D, reserved (always 0): 16 bytes
FEATURE_HEADER = np.dtype([("magic", "S4"), ("n", "<u4"), ("d", "<u4"), ("reserved", "<u4")])
CHECKPOINT_MAGIC = b"GTCK"


class ArtifactName(str):
    """
    Fixed artifact names under the experiment output directory.
    """

    DATA = "data"
    MANIFEST = "manifest.json"
    BASE_CHECKPOINT = "base.ckpt"
    TEACHER_CHECKPOINT = "teacher.ckpt"
    SMD_CHECKPOINT = "smd.ckpt"
    TRAIN_LOSS = "train_loss.csv"
    ADAPT_LOSS = "adapt_loss.csv"
    SMD_TRAIN_LOSS = "smd_train_loss.csv"
    RESOLVED_CONFIG = "resolved_config.json"
    DURATION_STATS = "duration_stats.csv"
    EVAL = "eval"
    PREDICTIONS = "predictions.json"
    REPORT_JSON = "report.json"
    REPORT_TEXT = "report.txt"
    MAP_CSV = "map.csv"
    DIAGNOSE = "diagnose"
    DIAGNOSTICS_JSON = "diagnostics.json"
    DIAGNOSTICS_TEXT = "diagnostics.txt"
    ATTENTION_BINS = "attention_bins.csv"
    PROTOCOL_CSV = "protocol.csv"
    PROTOCOL_TEXT = "protocol.txt"
    ABLATE_ALPHA = "ablate_alpha.csv"
    ABLATE_LOSSES = "ablate_losses.csv"
    SUMMARY_XLSX = "summary.xlsx"

    @staticmethod
    def dataset_dir(out_dir: str, distribution_id: str, split: str) -> str:
        return os.path.join(out_dir, ArtifactName.DATA, f"{distribution_id}-{split}")


class DatasetStore:
    """
    Dataset directory: manifest.json plus one <id>.feat per video.

    Example:
        DatasetStore.save(ds, "/tmp/out/data/short-train")
        ds = DatasetStore.load("/tmp/out/data/short-train")
    """

    @staticmethod
    def write_features(path: str, feats: FeatureSequence) -> None:
        n, d = feats.data.shape
        header = np.array([(FEATURE_MAGIC, n, d, 0)], dtype=FEATURE_HEADER)
        payload = np.ascontiguousarray(feats.data, dtype="<f4")
        with open(path, "wb") as f:
            f.write(header.tobytes())
            f.write(payload.tobytes())

    @staticmethod
    def read_features(path: str, stride: float) -> FeatureSequence:
        name = os.path.basename(path)
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < FEATURE_HEADER.itemsize:
            raise StoreFormatError(name, "header", f"expected {FEATURE_HEADER.itemsize} header bytes, got {len(raw)}")
        header = np.frombuffer(raw[: FEATURE_HEADER.itemsize], dtype=FEATURE_HEADER)[0]
        if header["magic"] != FEATURE_MAGIC:
            raise StoreFormatError(name, "magic", f"expected {FEATURE_MAGIC!r}, got {header['magic']!r}")
        n, d = int(header["n"]), int(header["d"])
        if n < 1 or d < 1:
            raise StoreFormatError(name, "N" if n < 1 else "D", f"header dims must be positive, got N={n}, D={d}")
        payload = raw[FEATURE_HEADER.itemsize :]
        expected = n * d * 4
        if len(payload) != expected:
            raise StoreFormatError(
                name, "payload", f"dimension mismatch: header N={n}, D={d} needs {expected} bytes, got {len(payload)}"
            )
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(n, d)
        return FeatureSequence(data=data, snippet_stride=stride)

    @staticmethod
    def save(ds: Dataset, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        videos = []
        for video in ds.videos:
            feature_file = f"{video.id}.feat"
            DatasetStore.write_features(os.path.join(directory, feature_file), video.features)
            videos.append(
                {
                    "id": video.id,
                    "duration": video.duration,
                    "stride": video.features.snippet_stride,
                    "label": [int(x) for x in video.label],
                    "instances": [
                        {"class_id": inst.class_id, "start": inst.start, "end": inst.end} for inst in video.instances
                    ],
                    "feature_file": feature_file,
                }
            )
        manifest = {
            "format_version": FORMAT_VERSION,
            "distribution_id": ds.distribution_id,
            "split": ds.split,
            "num_classes": ds.num_classes,
            "videos": videos,
        }
        ReportStore.write_json(os.path.join(directory, ArtifactName.MANIFEST), manifest)
        logging.info(f"Saved {ds.name} ({len(ds.videos)} videos) to {directory}")
        return directory

    @staticmethod
    def _field(entry: dict, key: str, file: str) -> Any:
        if key not in entry:
            raise StoreFormatError(file, key, "missing field")
        return entry[key]

    @staticmethod
    def load(directory: str) -> Dataset:
        manifest_path = os.path.join(directory, ArtifactName.MANIFEST)
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"No dataset manifest at {manifest_path}")
        with open(manifest_path, "r") as f:
            try:
                manifest = json.load(f)
            except json.JSONDecodeError as e:
                raise StoreFormatError(ArtifactName.MANIFEST, "json", str(e)) from e
        file = ArtifactName.MANIFEST
        version = DatasetStore._field(manifest, "format_version", file)
        if version != FORMAT_VERSION:
            raise StoreFormatError(file, "format_version", f"unknown format version {version}")
        num_classes = int(DatasetStore._field(manifest, "num_classes", file))

        videos: List[VideoRecord] = []
        for entry in DatasetStore._field(manifest, "videos", file):
            video_id = DatasetStore._field(entry, "id", file)
            stride = float(DatasetStore._field(entry, "stride", file))
            feats = DatasetStore.read_features(
                os.path.join(directory, DatasetStore._field(entry, "feature_file", file)), stride
            )
            label = np.asarray(DatasetStore._field(entry, "label", file), dtype=np.int8)
            if len(label) != num_classes:
                raise StoreFormatError(file, "label", f"{video_id}: length {len(label)} != num_classes {num_classes}")
            instances = tuple(
                GroundTruthInstance(class_id=int(i["class_id"]), start=float(i["start"]), end=float(i["end"]))
                for i in DatasetStore._field(entry, "instances", file)
            )
            videos.append(
                VideoRecord(
                    id=video_id,
                    features=feats,
                    label=label,
                    instances=instances,
                    duration=float(DatasetStore._field(entry, "duration", file)),
                )
            )
        return Dataset(
            distribution_id=DatasetStore._field(manifest, "distribution_id", file),
            split=DatasetStore._field(manifest, "split", file),
            videos=tuple(videos),
            num_classes=num_classes,
        )


class CheckpointStore:
    """
    Checkpoint file: magic "GTCK", u32 little-endian header length, JSON header, then one
    little-endian float64 payload per parameter tensor in declared order.
    """

    @staticmethod
    def save(model: WtalModel, path: str) -> str:
        tensors = [{"name": name, "shape": list(p.shape)} for name, p in model.ordered_parameters()]
        header = json.dumps(
            {"format_version": FORMAT_VERSION, "dims": model.dims(), "dropout": model.dropout, "tensors": tensors},
            sort_keys=True,
        ).encode("utf-8")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(np.array([len(header)], dtype="<u4").tobytes())
            f.write(header)
            for _, p in model.ordered_parameters():
                f.write(np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f8").tobytes())
        logging.info(f"Saved checkpoint to {path}")
        return path

    @staticmethod
    def load(path: str) -> WtalModel:
        name = os.path.basename(path)
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
            raise StoreFormatError(name, "magic", f"expected {CHECKPOINT_MAGIC!r}")
        header_len = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
        try:
            header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise StoreFormatError(name, "header", str(e)) from e
        if header.get("format_version") != FORMAT_VERSION:
            raise StoreFormatError(name, "format_version", f"unknown format version {header.get('format_version')}")
        dims = header["dims"]
        model = WtalModel(
            feature_dim=int(dims["feature_dim"]),
            num_classes=int(dims["num_classes"]),
            hidden_dim=int(dims["hidden_dim"]),
            dropout=float(header.get("dropout", 0.1)),
        )
        declared = [tensor.get("name") for tensor in header.get("tensors", [])]
        if declared != list(WtalModel.PARAM_ORDER):
            raise StoreFormatError(name, "tensors", f"expected {list(WtalModel.PARAM_ORDER)}, got {declared}")
        offset = 8 + header_len
        params = dict(model.ordered_parameters())
        with torch.no_grad():
            for tensor in header["tensors"]:
                target = params[tensor["name"]]
                if list(target.shape) != list(tensor["shape"]):
                    raise StoreFormatError(
                        name, tensor["name"], f"shape {tensor['shape']} does not match {list(target.shape)}"
                    )
                count = int(np.prod(tensor["shape"]))
                chunk = raw[offset : offset + count * 8]
                if len(chunk) != count * 8:
                    raise StoreFormatError(name, tensor["name"], "payload truncated")
                values = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(tensor["shape"])
                target.copy_(torch.from_numpy(values).to(DTYPE))
                offset += count * 8
        if offset != len(raw):
            raise StoreFormatError(name, "payload", f"{len(raw) - offset} trailing bytes")
        return model


class ReportStore:
    """
    Deterministic report writers: identical inputs give byte-identical files.
    """

    @staticmethod
    def _ensure_parent(path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    @staticmethod
    def write_json(path: str, data: Any) -> str:
        ReportStore._ensure_parent(path)
        with open(path, "w") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
        return path

    @staticmethod
    def read_json(path: str) -> Any:
        with open(path, "r") as f:
            return json.load(f)

    @staticmethod
    def write_csv(path: str, df: pd.DataFrame) -> str:
        ReportStore._ensure_parent(path)
        df.to_csv(path, index=False, float_format="%.10g")
        logging.info(f"Wrote {path}")
        return path

    @staticmethod
    def write_text(path: str, text: str) -> str:
        ReportStore._ensure_parent(path)
        with open(path, "w") as f:
            f.write(text)
        return path

    @staticmethod
    def inside(out_dir: str, name: str) -> Optional[str]:
        """
        Real path of name under out_dir, or None when it resolves outside out_dir.
        """
        root = os.path.realpath(out_dir)
        real = os.path.realpath(os.path.join(root, name))
        return real if os.path.commonpath([real, root]) == root else None

    @staticmethod
    def find(out_dir: str, name: str) -> Optional[str]:
        """
        Locate a report file by relative path or bare name under out_dir; never outside it.
        """
        direct = ReportStore.inside(out_dir, name)
        if direct is None:
            return None
        if os.path.isfile(direct):
            return direct
        if os.path.basename(name) != name:
            return None
        for root, _dirs, files in sorted(os.walk(out_dir)):
            if name in files:
                found = ReportStore.inside(out_dir, os.path.relpath(os.path.join(root, name), out_dir))
                if found is not None:
                    return found
        return None
