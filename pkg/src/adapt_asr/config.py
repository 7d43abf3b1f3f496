"""Load and validate corpus, model, training and preset configuration from YAML files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError

from adapt_asr.errors import ConfigError, DependencyError
from adapt_asr.models import (
    CemConfig,
    CorpusSpec,
    EncoderConfig,
    ExperimentSpec,
    JointConfig,
    ModelDefaults,
    PredictionNetConfig,
    Preset,
    PresetRow,
    SelfSupConfig,
    TrainingDefaults,
)

DEFAULT_CONFIG_DIR = Path(__file__).parent.parent.parent / "config"


def _read_yaml(config_dir: Path, filename: str) -> dict[str, Any]:
    path = config_dir / filename
    if not path.exists():
        msg = f"{filename} not found at {path}"
        raise DependencyError(msg)
    with open(path) as f:
        raw = yaml.safe_load(f)
    return raw or {}


def load_corpus_spec(config_dir: Path = DEFAULT_CONFIG_DIR) -> CorpusSpec:
    """Load the synthetic corpus recipe from corpus.yaml."""
    return CorpusSpec(**_read_yaml(config_dir, "corpus.yaml"))


def load_corpus_spec_file(path: Path, config_dir: Path = DEFAULT_CONFIG_DIR) -> CorpusSpec:
    """Read a CorpusSpec JSON file; unspecified fields take the corpus.yaml values."""
    if not path.exists():
        msg = f"Corpus spec not found at {path}"
        raise DependencyError(msg)
    try:
        override = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        msg = f"{path}: invalid JSON ({e})"
        raise ConfigError(msg) from e
    if not isinstance(override, dict):
        msg = f"{path}: expected a JSON object of CorpusSpec fields"
        raise ConfigError(msg)
    base = load_corpus_spec(config_dir).model_dump(mode="json")
    try:
        return CorpusSpec.model_validate(_deep_merge(base, override))
    except ValidationError as e:
        msg = f"{path}: {e}"
        raise ConfigError(msg) from e


def load_model_defaults(
    config_dir: Path = DEFAULT_CONFIG_DIR, *, full_size: bool = False
) -> ModelDefaults:
    """Load network geometry from model.yaml.

    With ``full_size`` the ``full_scale`` block replaces the desk-scale values.
    """
    raw = _read_yaml(config_dir, "model.yaml")
    scaled = raw.get("full_scale", {}) if full_size else {}
    merged = {**raw, **scaled}
    return ModelDefaults(
        student=EncoderConfig(**merged["student"]),
        teacher=EncoderConfig(**merged["teacher"]),
        pretrain_right_context=merged.get("pretrain_right_context", 8),
        predictor=PredictionNetConfig(**merged["predictor"]),
        joint=JointConfig(**merged["joint"]),
        selfsup=SelfSupConfig(**raw["selfsup"]),
        cem=CemConfig(**raw["cem"]),
        n_domains=merged.get("n_domains", 4),
        scale_factors=raw.get("scale_factors", {}),
        full_size=full_size,
    )


def load_training_defaults(config_dir: Path = DEFAULT_CONFIG_DIR) -> TrainingDefaults:
    """Load optimizer settings and step budgets from training.yaml."""
    return TrainingDefaults(**_read_yaml(config_dir, "training.yaml"))


def load_presets(config_dir: Path = DEFAULT_CONFIG_DIR) -> dict[str, Preset]:
    """Load the ablation grids from presets.yaml, keyed by preset name."""
    raw = _read_yaml(config_dir, "presets.yaml")
    presets: dict[str, Preset] = {}
    for name, body in raw.get("presets", {}).items():
        rows = [PresetRow(**row) for row in body.get("rows", [])]
        names = [row.name for row in rows]
        if len(set(names)) != len(names):
            msg = f"Preset '{name}' has duplicate row names"
            raise ConfigError(msg)
        presets[name] = Preset(name=name, description=body.get("description", ""), rows=rows)
    return presets


def default_experiment(name: str, config_dir: Path = DEFAULT_CONFIG_DIR) -> ExperimentSpec:
    """An ExperimentSpec populated entirely from the YAML defaults."""
    model = load_model_defaults(config_dir)
    train = load_training_defaults(config_dir)
    return ExperimentSpec(
        name=name,
        selfsup=model.selfsup,
        confidence_threshold=train.confidence_threshold,
        beam_size=train.beam_size,
        student=model.student,
        teacher=model.teacher,
        predictor=model.predictor,
        joint=model.joint,
        cem=model.cem,
        optimizer=train.optimizer,
        training=train.training,
        augment=train.augment,
        decode=train.decode,
    )


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_experiment_spec(path: Path, config_dir: Path = DEFAULT_CONFIG_DIR) -> ExperimentSpec:
    """Read an ExperimentSpec JSON file; unspecified fields take the YAML defaults."""
    if not path.exists():
        msg = f"Experiment spec not found at {path}"
        raise DependencyError(msg)
    try:
        override = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        msg = f"{path}: invalid JSON ({e})"
        raise ConfigError(msg) from e
    if not isinstance(override, dict) or "name" not in override:
        msg = f"{path}: expected a JSON object with at least a 'name'"
        raise ConfigError(msg)
    base = default_experiment(override["name"], config_dir).model_dump(mode="json", by_alias=True)
    try:
        return ExperimentSpec.model_validate(_deep_merge(base, override))
    except ValidationError as e:
        msg = f"{path}: {e}"
        raise ConfigError(msg) from e


def spec_for_row(
    row: PresetRow,
    config_dir: Path = DEFAULT_CONFIG_DIR,
    *,
    seed: int = 0,
    base: ExperimentSpec | None = None,
) -> ExperimentSpec:
    """Expand one preset row into a full ExperimentSpec."""
    if base is None:
        spec = default_experiment(row.name, config_dir)
    else:
        spec = base.model_copy(update={"name": row.name})
    selfsup = spec.selfsup
    if row.selfsup_kind is not None:
        selfsup = selfsup.model_copy(update={"kind": row.selfsup_kind})
    if row.selfsup_lambda is not None:
        selfsup = selfsup.model_copy(update={"lambda_": row.selfsup_lambda})
    update: dict[str, Any] = {
        "algorithm": row.algorithm,
        "data_split": row.data_split,
        "label_fraction": row.label_fraction,
        "selfsup": selfsup,
        "seed": seed,
    }
    if row.confidence_threshold is not None:
        update["confidence_threshold"] = row.confidence_threshold
    if row.pseudo_label_source is not None:
        update["pseudo_label_source"] = row.pseudo_label_source
    if row.pretrain_right_context is not None:
        update["pretrain_encoder"] = spec.student.model_copy(
            update={"right_context": row.pretrain_right_context, "causal_conv": False}
        )
    return spec.model_copy(update=update)
