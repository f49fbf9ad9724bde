"""Run configuration: TOML loading, whole-config validation, fingerprinting.

The file is validated completely before any work starts; unknown keys are
rejected so typos fail fast instead of silently using defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .data import DatasetSpec, default_class_names
from .nets import ModelConfig
from .trainer import TrainConfig

SEED_ENV_VAR = "U2S_SEED"


class ConfigError(ValueError):
    """Invalid or unknown run-configuration contents."""


@dataclass
class RunConfig:
    name: str
    out_dir: str
    seed: int
    dataset_kind: str  # "synthetic" | "csv"
    dataset: DatasetSpec
    class_names: list[str]
    train_csv: str | None
    test_csv: str | None
    model: ModelConfig
    train: TrainConfig
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    def fingerprint(self) -> str:
        """Hash of the semantically relevant sections (not name/out_dir)."""
        payload = {k: v for k, v in self.raw.items() if k in ("dataset", "model", "train", "csm")}
        payload["seed"] = self.seed
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest()


_SCHEMA: dict[str, dict[str, type | tuple]] = {
    "run": {"name": str, "out_dir": str, "seed": int},
    "dataset": {
        "kind": str,
        "num_classes": int,
        "confusable_pairs": list,
        "train_per_class": int,
        "test_per_class": int,
        "clip_frames": int,
        "height": int,
        "width": int,
        "signal_scale": (int, float),
        "noise_scale": (int, float),
        "patch_height": int,
        "patch_width": int,
        "class_names": list,
        "train_csv": str,
        "test_csv": str,
    },
    "model": {
        "segments": int,
        "embed_channels": int,
        "bottom_layers": int,
        "top_layers": int,
        "feature_channels": int,
    },
    "train": {
        "batch_size": int,
        "stage1_epochs": int,
        "stage2_epochs": int,
        "joint_epochs": int,
        "stage_lr": (int, float),
        "joint_lr": (int, float),
        "momentum": (int, float),
        "weight_decay": (int, float),
        "reg_lambda": (int, float),
        "plateau_patience": int,
        "lr_decay_factor": (int, float),
        "fusion": list,
        "fusion_space": str,
    },
    "csm": {
        "target_degree": (int, float),
        "mode": str,
        "metric": str,
        "weight_similarity": str,
    },
}

_REQUIRED = {
    "run": ("name",),
    "dataset": ("kind", "num_classes", "clip_frames", "height", "width"),
    "model": (),
    "train": (),
    "csm": (),
}


def _check_keys(table: dict, section: str) -> None:
    schema = _SCHEMA[section]
    for key, value in table.items():
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}")
        expected = schema[key]
        if not isinstance(value, expected if isinstance(expected, tuple) else (expected,)):
            raise ConfigError(f"{section}.{key} has wrong type {type(value).__name__}")
    for key in _REQUIRED[section]:
        if key not in table:
            raise ConfigError(f"missing required key {section}.{key}")


def parse_run_config(payload: dict, base_dir: Path) -> RunConfig:
    unknown = set(payload) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
    for section in _SCHEMA:
        if section in payload and not isinstance(payload[section], dict):
            raise ConfigError(f"[{section}] must be a table")
        _check_keys(payload.get(section, {}), section)

    run = payload.get("run", {})
    if "name" not in run:
        raise ConfigError("missing required key run.name")
    seed = int(run.get("seed", 0))
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc

    ds = payload.get("dataset", {})
    kind = ds.get("kind", "synthetic")
    if kind not in ("synthetic", "csv"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {kind!r}")
    num_classes = int(ds["num_classes"])
    pairs = tuple(tuple(int(x) for x in pair) for pair in ds.get("confusable_pairs", []))
    spec = DatasetSpec(
        num_classes=num_classes,
        confusable_pairs=pairs,
        train_per_class=int(ds.get("train_per_class", 1)),
        test_per_class=int(ds.get("test_per_class", 1)),
        grid=(int(ds["clip_frames"]), int(ds["height"]), int(ds["width"])),
        signal_scale=float(ds.get("signal_scale", 1.0)),
        noise_scale=float(ds.get("noise_scale", 0.0)),
        patch=(int(ds.get("patch_height", 2)), int(ds.get("patch_width", 2))),
        seed=seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    names = list(ds.get("class_names", default_class_names(num_classes)))
    if len(names) != num_classes:
        raise ConfigError(f"dataset.class_names has {len(names)} entries for {num_classes} classes")
    train_csv = test_csv = None
    if kind == "csv":
        for key in ("train_csv", "test_csv"):
            if key not in ds:
                raise ConfigError(f"dataset.{key} is required when dataset.kind = 'csv'")
        train_csv = str(base_dir / ds["train_csv"])
        test_csv = str(base_dir / ds["test_csv"])

    mo = payload.get("model", {})
    segments = int(mo.get("segments", spec.grid[0]))
    if segments > spec.grid[0]:
        raise ConfigError(f"model.segments ({segments}) exceeds dataset.clip_frames ({spec.grid[0]})")
    model = ModelConfig(
        input_grid=(segments, 1, spec.grid[1], spec.grid[2]),
        embed_channels=int(mo.get("embed_channels", 16)),
        bottom_layers=int(mo.get("bottom_layers", 1)),
        top_layers=int(mo.get("top_layers", 1)),
        feature_channels=int(mo.get("feature_channels", 16)),
        num_classes=num_classes,
        seed=seed,
    )
    try:
        model.validate()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc

    tr = payload.get("train", {})
    cs = payload.get("csm", {})
    train = TrainConfig(
        batch_size=int(tr.get("batch_size", 20)),
        stage1_epochs=int(tr.get("stage1_epochs", 20)),
        stage2_epochs=int(tr.get("stage2_epochs", 20)),
        joint_epochs=int(tr.get("joint_epochs", 10)),
        stage_lr=float(tr.get("stage_lr", 1e-3)),
        joint_lr=float(tr.get("joint_lr", 1e-4)),
        momentum=float(tr.get("momentum", 0.9)),
        weight_decay=float(tr.get("weight_decay", 1e-4)),
        reg_lambda=float(tr.get("reg_lambda", 0.5)),
        target_degree=float(cs.get("target_degree", 1.0)),
        csm_mode=str(cs.get("mode", "binary")),
        csm_metric=str(cs.get("metric", "cosine")),
        weight_similarity=str(cs.get("weight_similarity", "affine_cos")),
        fusion_set=tuple(tr.get("fusion", ("universal", "bridge", "specific"))),
        fusion_space=str(tr.get("fusion_space", "probs")),
        plateau_patience=int(tr.get("plateau_patience", 3)),
        lr_decay_factor=float(tr.get("lr_decay_factor", 10.0)),
        seed=seed,
    )
    try:
        train.validate()
        if not 1 <= train.target_degree < num_classes:
            raise ValueError(
                f"csm.target_degree must lie in [1, {num_classes}), got {train.target_degree}"
            )
        if train.csm_metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown csm.metric {train.csm_metric!r}")
        if train.weight_similarity not in ("affine_cos", "cos_squared"):
            raise ValueError(f"unknown csm.weight_similarity {train.weight_similarity!r}")
    except ValueError as exc:
        raise ConfigError(f"train/csm: {exc}") from exc

    return RunConfig(
        name=str(run["name"]),
        out_dir=str(base_dir / run.get("out_dir", "runs")),
        seed=seed,
        dataset_kind=kind,
        dataset=spec,
        class_names=names,
        train_csv=train_csv,
        test_csv=test_csv,
        model=model,
        train=train,
        raw=payload,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            payload = tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_run_config(payload, base_dir=path.resolve().parent)
