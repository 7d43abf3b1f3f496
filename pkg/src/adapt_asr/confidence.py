"""Confidence estimation for pseudo-labels: per-token correctness, utterance scores,
threshold filtering and the JSON-lines pseudo-label manifest.

Tokens play the role of words here. The estimator is a small MLP over detached
inputs, so its loss never reaches the encoder or the transducer.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from adapt_asr import tensor as T
from adapt_asr.errors import ContractError, CorpusFormatError, DependencyError
from adapt_asr.layers import add_mlp, mlp
from adapt_asr.models import CemConfig, FilterStats, PseudoLabelRecord
from adapt_asr.optim import ModelParams
from adapt_asr.scoring import aggregate, align, wer
from adapt_asr.tensor import Array, Tensor
from adapt_asr.transducer import PREDICTOR_PREFIX, Emission

logger = logging.getLogger(__name__)

CEM_PREFIX = "cem"


def cem_input_dim(model_dim: int, embed_dim: int) -> int:
    """Encoder frame, token embedding, token log-prob and step entropy."""
    return model_dim + embed_dim + 2


def build_cem_params(config: CemConfig, model_dim: int, embed_dim: int, seed: int) -> ModelParams:
    params = ModelParams()
    dims = [cem_input_dim(model_dim, embed_dim), config.hidden, 1]
    add_mlp(params, f"{CEM_PREFIX}.mlp", dims, seed)
    return params


# --- Estimation ---


def emission_features(
    params: ModelParams, encodings: Array, emissions: Sequence[Emission]
) -> Array:
    """Detached estimator inputs ``[N, cem_input_dim]``, one row per emitted token."""
    embed = params[f"{PREDICTOR_PREFIX}.embed"].data
    rows = [
        np.concatenate([encodings[e.frame], embed[e.token], [e.log_prob, e.entropy]])
        for e in emissions
    ]
    if not rows:
        return np.zeros((0, encodings.shape[1] + embed.shape[1] + 2))
    return np.stack(rows)


def cem_forward(params: ModelParams, features: Array) -> Tensor:
    """Per-token confidence ``p[N]`` in (0, 1)."""
    expected = params[f"{CEM_PREFIX}.mlp.0.w"].shape[0]
    if features.ndim != 2 or features.shape[1] != expected:
        msg = f"cem_forward: features {features.shape} vs expected [N, {expected}]"
        raise ContractError(msg)
    logits = mlp(params, f"{CEM_PREFIX}.mlp", Tensor(features), depth=2)
    return T.reshape(T.sigmoid(logits), (features.shape[0],))


@dataclass
class ConfidenceScore:
    token_confidence: Array
    utterance_score: float


def score_hypothesis(
    params: ModelParams, encodings: Array, emissions: Sequence[Emission]
) -> ConfidenceScore:
    """Mean token confidence; an empty hypothesis scores 0 so any positive threshold drops it."""
    if not emissions:
        return ConfidenceScore(np.zeros(0), 0.0)
    with T.no_grad():
        p = cem_forward(params, emission_features(params, encodings, emissions)).data
    return ConfidenceScore(p, float(p.mean()))


# --- Training targets and loss ---


def confidence_targets(hyp: Sequence[int], ref: Sequence[int]) -> list[int]:
    """1 for hypothesis tokens aligned as matches, 0 for substitutions and insertions."""
    targets = [0] * len(hyp)
    for pair in align(hyp, ref):
        if pair.kind == "match" and pair.hyp_index is not None:
            targets[pair.hyp_index] = 1
    return targets


def confidence_loss(p: Tensor, c: Sequence[int]) -> Tensor:
    if p.shape != (len(c),):
        msg = f"confidence_loss: {p.shape} confidences vs {len(c)} targets"
        raise ContractError(msg)
    return T.binary_cross_entropy(p, np.asarray(c, dtype=np.float64))


# --- Filtering ---


@dataclass
class FilterResult:
    records: list[PseudoLabelRecord]
    stats: FilterStats
    kept: list[PseudoLabelRecord] = field(init=False)

    def __post_init__(self) -> None:
        self.kept = [r for r in self.records if r.kept]


def filter_utterances(records: Sequence[PseudoLabelRecord], threshold: float) -> FilterResult:
    """Mark records kept iff ``utterance_score >= threshold``."""
    marked = [
        r.model_copy(update={"kept": r.utterance_score >= threshold}) for r in records
    ]
    n_kept = sum(r.kept for r in marked)
    n_total = len(marked)
    stats = FilterStats(
        threshold=threshold,
        n_total=n_total,
        n_kept=n_kept,
        n_dropped=n_total - n_kept,
        dropped_fraction=(n_total - n_kept) / n_total if n_total else 0.0,
    )
    logger.info("Confidence filter at %.2f kept %d of %d", threshold, n_kept, n_total)
    return FilterResult(marked, stats)


def pseudo_label_wer(
    records: Sequence[PseudoLabelRecord], references: Mapping[str, Sequence[int]]
) -> float | None:
    """Micro-averaged WER of pseudo-labels against held ground truth (None when empty)."""
    if not records:
        return None
    return aggregate([wer(r.tokens, references[r.utt_id]) for r in records]).wer


# --- Manifest ---


def write_manifest(records: Sequence[PseudoLabelRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r.model_dump(mode="json")) for r in records]
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_manifest(path: Path) -> list[PseudoLabelRecord]:
    if not path.exists():
        msg = f"Pseudo-label manifest not found at {path}"
        raise DependencyError(msg)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(PseudoLabelRecord.model_validate_json(line))
        except ValidationError as e:
            msg = f"{path}:{lineno}: invalid pseudo-label record ({e})"
            raise CorpusFormatError(msg) from e
    return records
