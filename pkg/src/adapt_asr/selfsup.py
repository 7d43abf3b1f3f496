"""Self-supervised encoder objectives: future-frame contrastive (wav2vec), masked
contrastive (wav2vec2, unquantized targets) and autoregressive predictive coding.

Each objective reads the last encoder layer through its own two-layer head.
Targets are the stacked acoustic columns of the encoder input; the domain one-hot
columns are never predicted and never masked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from adapt_asr import tensor as T
from adapt_asr.encoder import ENCODER_PREFIX, encode
from adapt_asr.errors import ConfigError, ContractError
from adapt_asr.layers import add_linear, add_mlp, linear, mlp
from adapt_asr.models import EncoderConfig, SelfSupConfig, SelfSupKind
from adapt_asr.optim import ModelParams, component_rng
from adapt_asr.tensor import Array, Tensor

logger = logging.getLogger(__name__)

SELFSUP_PREFIX = "selfsup"


def validate_selfsup_config(config: SelfSupConfig) -> None:
    if config.lambda_ < 0:
        msg = f"self-sup lambda must be >= 0, got {config.lambda_}"
        raise ConfigError(msg)
    if not 0.0 < config.mask_prob < 1.0:
        msg = f"mask_prob must lie in (0, 1), got {config.mask_prob}"
        raise ConfigError(msg)


def build_selfsup_params(
    config: SelfSupConfig, model_dim: int, acoustic_dim: int, seed: int
) -> ModelParams:
    """Head parameters for the configured objective only."""
    validate_selfsup_config(config)
    params = ModelParams()
    hidden = config.head_hidden
    head = f"{SELFSUP_PREFIX}.head"
    if config.kind == SelfSupKind.WAV2VEC:
        add_mlp(params, head, [model_dim, hidden, hidden], seed)
        for k in range(1, config.future_steps + 1):
            add_linear(params, f"{SELFSUP_PREFIX}.step{k}", hidden, acoustic_dim, seed)
    else:
        add_mlp(params, head, [model_dim, hidden, acoustic_dim], seed)
    if config.kind == SelfSupKind.WAV2VEC2:
        rng = component_rng(seed, f"{SELFSUP_PREFIX}.mask_embedding")
        params.add(f"{SELFSUP_PREFIX}.mask_embedding", rng.normal(0.0, 0.1, size=acoustic_dim))
    return params


def _head(params: ModelParams, enc: Tensor) -> Tensor:
    return mlp(params, f"{SELFSUP_PREFIX}.head", enc, depth=2)


# --- Contrastive scoring ---


def contrastive_scores(preds: Tensor, candidates: Array) -> Tensor:
    """Scaled dot products ``[N, C]`` of ``preds[N, A]`` with ``candidates[N, C, A]``."""
    n, width = preds.shape
    if candidates.ndim != 3 or candidates.shape[0] != n or candidates.shape[2] != width:
        msg = f"contrastive_scores: preds {preds.shape} vs candidates {candidates.shape}"
        raise ContractError(msg)
    rows = T.reshape(preds, (n, 1, width))
    cols = Tensor(np.ascontiguousarray(candidates.transpose(0, 2, 1)))
    scores = T.reshape(T.matmul(rows, cols), (n, candidates.shape[1]))
    return T.scale(scores, 1.0 / np.sqrt(width))


def contrastive_loss(scores: Tensor) -> Tensor:
    """Mean InfoNCE over rows of ``scores[N, 1 + n_negatives]``; column 0 is the positive."""
    if scores.ndim != 2 or scores.shape[0] == 0 or scores.shape[1] < 2:
        msg = f"contrastive_loss: need [N >= 1, C >= 2] scores, got {scores.shape}"
        raise ContractError(msg)
    log_p = T.log_softmax_lastdim(scores)
    return T.scale(T.mean(T.slice_along(log_p, 1, 0, 1)), -1.0)


def _sample_excluding(
    rng: np.random.Generator, n_choices: int, excluded: int, count: int
) -> NDArray[np.int64]:
    """``count`` draws from ``range(n_choices)`` without ``excluded`` (with replacement)."""
    draws = rng.integers(0, n_choices - 1, size=count)
    draws[draws >= excluded] += 1
    return draws


# --- wav2vec: future-frame prediction from causal context ---


def wav2vec_loss(
    params: ModelParams,
    enc: Tensor,
    targets: Array,
    config: SelfSupConfig,
    rng: np.random.Generator,
) -> Tensor | None:
    """Contrastive prediction of frames ``t+1 .. t+K`` from encoding ``t``.

    Negatives are other frames of the same utterance. Returns None when the
    utterance has no more than ``future_steps`` frames.
    """
    n_frames = enc.shape[0]
    steps = config.future_steps
    if targets.shape[0] != n_frames:
        msg = f"wav2vec_loss: encodings {enc.shape} vs targets {targets.shape}"
        raise ContractError(msg)
    if n_frames <= steps:
        logger.warning("wav2vec: skipping utterance with %d frames (K=%d)", n_frames, steps)
        return None
    shared = _head(params, enc)
    all_scores = []
    for k in range(1, steps + 1):
        step = linear(params, f"{SELFSUP_PREFIX}.step{k}", shared)
        preds = T.slice_along(step, 0, 0, n_frames - k)
        index = np.empty((n_frames - k, 1 + config.n_negatives), dtype=np.int64)
        for t in range(n_frames - k):
            index[t, 0] = t + k
            index[t, 1:] = _sample_excluding(rng, n_frames, t + k, config.n_negatives)
        all_scores.append(contrastive_scores(preds, targets[index]))
    return contrastive_loss(T.concat(all_scores, axis=0))


# --- wav2vec2: masked-frame identification ---


@dataclass(frozen=True)
class MaskPlan:
    """Non-overlapping masked spans ``[start, stop)`` over ``n_frames`` frames."""

    n_frames: int
    spans: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        last = 0
        for start, stop in self.spans:
            if not last <= start < stop <= self.n_frames:
                msg = f"MaskPlan: span ({start}, {stop}) invalid for {self.n_frames} frames"
                raise ContractError(msg)
            last = stop

    @property
    def indices(self) -> list[int]:
        return [i for start, stop in self.spans for i in range(start, stop)]

    @property
    def masked_fraction(self) -> float:
        return len(self.indices) / self.n_frames


def plan_mask(n_frames: int, config: SelfSupConfig, rng: np.random.Generator) -> MaskPlan:
    """Draw about ``mask_prob * n_frames`` masked frames in spans of up to ``mask_span``."""
    validate_selfsup_config(config)
    expected = config.mask_prob * n_frames
    span = min(config.mask_span, max(1, round(expected)))
    n_spans = max(1, round(expected / span))
    chosen: list[int] = []
    for start in rng.permutation(n_frames - span + 1):
        if len(chosen) == n_spans:
            break
        if all(abs(int(start) - other) >= span for other in chosen):
            chosen.append(int(start))
    plan = MaskPlan(n_frames, tuple((s, s + span) for s in sorted(chosen)))
    if len(plan.indices) >= n_frames:
        msg = f"mask plan covers all {n_frames} frames (mask_prob={config.mask_prob})"
        raise ConfigError(msg)
    return plan


def apply_mask(features: Array, plan: MaskPlan, mask_embedding: Tensor) -> Tensor:
    """Replace the acoustic columns of masked frames by the learned mask embedding."""
    width = mask_embedding.shape[0]
    if features.shape[0] != plan.n_frames or features.shape[1] < width:
        msg = f"apply_mask: features {features.shape} vs plan over {plan.n_frames} frames"
        raise ContractError(msg)
    rows = plan.indices
    out = np.array(features, dtype=np.float64)
    out[rows, :width] = mask_embedding.data

    def grad_fn(g: Array) -> tuple[Array]:
        return (g[rows, :width].sum(axis=0),)

    return T.make_op("apply_mask", (mask_embedding,), out, grad_fn)


def wav2vec2_loss(
    params: ModelParams,
    enc: Tensor,
    plan: MaskPlan,
    targets: Array,
    config: SelfSupConfig,
    rng: np.random.Generator,
) -> Tensor | None:
    """Identify each masked frame's clean features among other masked frames.

    ``enc`` must come from the masked input. Returns None when fewer than two
    frames are masked (no negative exists).
    """
    masked = plan.indices
    if not masked:
        msg = "wav2vec2_loss: mask plan is empty"
        raise ContractError(msg)
    if enc.shape[0] != plan.n_frames or targets.shape[0] != plan.n_frames:
        msg = f"wav2vec2_loss: encodings {enc.shape}, targets {targets.shape}, plan {plan.n_frames}"
        raise ContractError(msg)
    if len(masked) < 2:
        logger.warning("wav2vec2: skipping utterance with a single masked frame")
        return None
    preds = T.take_rows(_head(params, enc), masked)
    index = np.empty((len(masked), 1 + config.n_negatives), dtype=np.int64)
    for row, frame in enumerate(masked):
        index[row, 0] = frame
        others = _sample_excluding(rng, len(masked), row, config.n_negatives)
        index[row, 1:] = np.asarray(masked)[others]
    return contrastive_loss(contrastive_scores(preds, targets[index]))


# --- APC: future-frame regression with a total-variation stabiliser ---


def prediction_mse(preds: Tensor, targets: Array) -> Tensor:
    diff = T.sub(preds, Tensor(targets))
    return T.mean(T.mul(diff, diff))


def total_variation(preds: Tensor) -> Tensor:
    """Mean squared step ``||pred[t+1] - pred[t]||^2`` over consecutive pairs."""
    n = preds.shape[0]
    if n < 2:
        return T.scale(T.sum(preds), 0.0)
    step = T.sub(T.slice_along(preds, 0, 1, n), T.slice_along(preds, 0, 0, n - 1))
    return T.scale(T.sum(T.mul(step, step)), 1.0 / (n - 1))


def apc_objective(preds: Tensor, features: Array, shift: int, tv_weight: float) -> Tensor:
    """MSE of ``preds[t]`` against ``features[t + shift]`` plus the weighted TV penalty."""
    n = features.shape[0] - shift
    if n <= 0 or preds.shape[0] != features.shape[0]:
        msg = f"apc_objective: preds {preds.shape}, features {features.shape}, shift {shift}"
        raise ContractError(msg)
    used = T.slice_along(preds, 0, 0, n)
    loss = prediction_mse(used, features[shift:])
    if tv_weight > 0:
        loss = T.add(loss, T.scale(total_variation(used), tv_weight))
    return loss


def apc_loss(
    params: ModelParams, enc: Tensor, features: Array, config: SelfSupConfig
) -> Tensor | None:
    n_frames = enc.shape[0]
    if n_frames <= config.apc_shift:
        logger.warning("apc: skipping utterance with %d frames (n=%d)", n_frames, config.apc_shift)
        return None
    return apc_objective(_head(params, enc), features, config.apc_shift, config.apc_tv_weight)


# --- Joint objective ---


def joint_loss(l_rnnt: Tensor, l_selfsup: Tensor | None, lam: float) -> Tensor:
    """``l_rnnt + lam * l_selfsup``; a skipped self-sup term contributes nothing."""
    if lam < 0:
        msg = f"joint_loss: lambda must be >= 0, got {lam}"
        raise ConfigError(msg)
    if l_selfsup is None or lam == 0:
        return l_rnnt
    return T.add(l_rnnt, T.scale(l_selfsup, lam))


@dataclass
class SelfSupPass:
    """Encoder output of one utterance and its self-sup loss (None when skipped)."""

    encodings: Tensor
    loss: Tensor | None


def selfsup_pass(
    params: ModelParams,
    features: Array,
    encoder_config: EncoderConfig,
    config: SelfSupConfig,
    acoustic_dim: int,
    rng: np.random.Generator,
    *,
    prefix: str = ENCODER_PREFIX,
) -> SelfSupPass:
    """Encode one utterance and compute the configured objective on that pass.

    wav2vec2 masks the encoder input first; the returned encodings then come from
    the masked pass, which joint training also feeds to the RNN-T loss.
    """
    targets = features[:, :acoustic_dim]
    if config.kind == SelfSupKind.WAV2VEC2 and features.shape[0] < 2:
        logger.warning("wav2vec2: skipping single-frame utterance")
        return SelfSupPass(encode(params, features, encoder_config, prefix=prefix).encodings, None)
    if config.kind == SelfSupKind.WAV2VEC2:
        plan = plan_mask(features.shape[0], config, rng)
        masked = apply_mask(features, plan, params[f"{SELFSUP_PREFIX}.mask_embedding"])
        enc = encode(params, masked, encoder_config, prefix=prefix).encodings
        return SelfSupPass(enc, wav2vec2_loss(params, enc, plan, targets, config, rng))
    enc = encode(params, features, encoder_config, prefix=prefix).encodings
    if config.kind == SelfSupKind.WAV2VEC:
        return SelfSupPass(enc, wav2vec_loss(params, enc, targets, config, rng))
    return SelfSupPass(enc, apc_loss(params, enc, targets, config))
