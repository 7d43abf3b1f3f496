"""Shared fixtures: a tiny corpus and a tiny experiment that train in seconds."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import special

from adapt_asr.models import (
    CemConfig,
    CorpusSpec,
    EncoderConfig,
    ExperimentSpec,
    JointConfig,
    PredictionNetConfig,
    SelfSupConfig,
    TrainingConfig,
)
from adapt_asr.synthgen import Corpus, generate
from adapt_asr.tensor import Array


def tiny_corpus_spec(**overrides: object) -> CorpusSpec:
    values: dict[str, object] = {
        "vocab_size": 6,
        "feat_dim": 3,
        "source_len_range": (6, 9),
        "target_len_range": (18, 27),
        "token_frames": (2, 3),
        "n_source": 12,
        "n_target": 12,
        "n_eval_source": 4,
        "n_eval_target": 4,
        "target_label_fraction": 0.25,
        "stack": 2,
        "subsample": 3,
        "min_tv_distance": 0.0,
        "min_probe_accuracy": 0.0,
        "seed": 7,
    }
    values.update(overrides)
    return CorpusSpec.model_validate(values)


def tiny_encoder(**overrides: object) -> EncoderConfig:
    values: dict[str, object] = {
        "n_blocks": 1,
        "model_dim": 8,
        "n_heads": 2,
        "left_context": 4,
        "conv_kernel": 3,
        "ff_expansion": 2,
    }
    values.update(overrides)
    return EncoderConfig.model_validate(values)


def tiny_experiment(name: str = "tiny", **overrides: object) -> ExperimentSpec:
    values: dict[str, object] = {
        "name": name,
        "student": tiny_encoder(),
        "teacher": tiny_encoder(right_context=2, causal_conv=False),
        "predictor": PredictionNetConfig(embed_dim=4, hidden=8, proj=4),
        "joint": JointConfig(joint_dim=8, max_symbols_per_frame=2),
        "selfsup": SelfSupConfig(head_hidden=8, n_negatives=4, future_steps=2, apc_shift=1),
        "cem": CemConfig(hidden=4, train_beam_size=2),
        "training": TrainingConfig(
            steps=3,
            pretrain_steps=2,
            teacher_steps=3,
            batch_size=2,
            eval_every=2,
            eval_utterances=2,
            log_every=1,
        ),
        "confidence_threshold": 0.0,
        "beam_size": 2,
    }
    values.update(overrides)
    return ExperimentSpec.model_validate(values)


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    return generate(tiny_corpus_spec())


@pytest.fixture
def spec() -> ExperimentSpec:
    return tiny_experiment()


# --- Transducer oracles ---


def brute_force_nll(logits: Array, targets: list[int], blank: int) -> float:
    """-log of the summed probability of every blank/label path through the lattice."""
    lp = logits - special.logsumexp(logits, axis=-1, keepdims=True)
    n_frames, _, _ = lp.shape
    n_labels = len(targets)
    paths = []

    def walk(t: int, u: int, score: float) -> None:
        if t == n_frames - 1 and u == n_labels:
            paths.append(score + lp[t, u, blank])
            return
        if u < n_labels:
            walk(t, u + 1, score + lp[t, u, targets[u]])
        if t < n_frames - 1:
            walk(t + 1, u, score + lp[t, u, blank])

    walk(0, 0, 0.0)
    return float(-special.logsumexp(paths))


def random_lattice(
    rng: np.random.Generator, n_frames: int, n_labels: int, width: int = 4
) -> tuple[Array, list[int]]:
    """Random joint logits and non-blank targets; the blank is the last index."""
    logits = rng.normal(scale=2.0, size=(n_frames, n_labels + 1, width))
    targets = [int(y) for y in rng.integers(0, width - 1, size=n_labels)]
    return logits, targets
