"""The mini-batch training loop shared by every recipe."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from adapt_asr import tensor as T
from adapt_asr.errors import ContractError, DivergenceError
from adapt_asr.models import OptimizerConfig, WerPoint
from adapt_asr.optim import AdamState, ModelParams, adam_step
from adapt_asr.synthgen import Utterance
from adapt_asr.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

UtteranceLoss = Callable[[ModelParams, Utterance, np.random.Generator, int], Tensor | None]
"""``(params, utterance, sampling_rng, step) -> loss`` or None to skip the utterance."""

Evaluator = Callable[[ModelParams], float]


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    wer_curve: list[WerPoint] = field(default_factory=list)
    steps_run: int = 0
    diverged: bool = False
    skipped_updates: int = 0


def sample_batch(rng: np.random.Generator, n_items: int, batch_size: int) -> list[int]:
    """Indices of one mini-batch; drawn with replacement only when the pool is smaller."""
    if n_items == 0:
        msg = "sample_batch: training pool is empty"
        raise ContractError(msg)
    replace = n_items < batch_size
    return [int(i) for i in rng.choice(n_items, size=batch_size, replace=replace)]


def batch_loss(
    params: ModelParams,
    batch: Sequence[Utterance],
    loss_fn: UtteranceLoss,
    rng: np.random.Generator,
    step: int,
) -> Tensor | None:
    """Mean of the per-utterance losses that were not skipped."""
    terms = [loss for u in batch if (loss := loss_fn(params, u, rng, step)) is not None]
    if not terms:
        return None
    return T.scale(reduce(T.add, terms), 1.0 / len(terms))


def _step(
    params: ModelParams,
    batch: Sequence[Utterance],
    loss_fn: UtteranceLoss,
    rng: np.random.Generator,
    step: int,
    adam: AdamState,
    optimizer: OptimizerConfig,
) -> float | None:
    params.zero_grad()
    with Tape() as tape:
        try:
            loss = batch_loss(params, batch, loss_fn, rng, step)
        except ContractError as e:
            if "non-finite" not in str(e):
                raise
            msg = f"step {step}: {e}"
            raise DivergenceError(msg) from e
        if loss is None:
            return None
        if not np.isfinite(loss.data).all():
            msg = f"step {step}: loss is {loss.item()}"
            raise DivergenceError(msg)
        tape.backward(loss)
    adam_step(
        params,
        adam,
        lr=optimizer.lr,
        betas=(optimizer.beta1, optimizer.beta2),
        eps=optimizer.eps,
        clip_norm=optimizer.clip_norm,
    )
    return loss.item()


def train_loop(
    params: ModelParams,
    pool: Sequence[Utterance],
    loss_fn: UtteranceLoss,
    *,
    steps: int,
    optimizer: OptimizerConfig,
    batch_size: int,
    seed: int,
    stream: int,
    label: str = "train",
    log_every: int = 50,
    evaluate: Evaluator | None = None,
    eval_every: int = 100,
) -> TrainResult:
    """Run ``steps`` Adam updates of ``params`` in place on batches drawn from ``pool``.

    Batch order and self-sup sampling come from generators seeded by
    ``(seed, stream)``, so two recipes with equal seeds see equal batches.
    A non-finite loss stops training and marks the result diverged.
    """
    batch_rng = np.random.default_rng([seed, stream, 1])
    sample_rng = np.random.default_rng([seed, stream, 2])
    adam = AdamState.for_params(params)
    result = TrainResult(params)
    if evaluate is not None:
        result.wer_curve.append(WerPoint(step=0, wer_target=evaluate(params)))
    for step in range(1, steps + 1):
        batch = [pool[i] for i in sample_batch(batch_rng, len(pool), batch_size)]
        try:
            value = _step(params, batch, loss_fn, sample_rng, step, adam, optimizer)
        except DivergenceError as e:
            logger.error("%s diverged: %s", label, e)
            result.diverged = True
            break
        result.steps_run = step
        if value is None:
            logger.warning("%s step %d: every utterance in the batch was skipped", label, step)
        else:
            result.losses.append(value)
        if step % log_every == 0 and result.losses:
            logger.info("%s step %d/%d loss %.4f", label, step, steps, result.losses[-1])
        if evaluate is not None and (step % eval_every == 0 or step == steps):
            point = WerPoint(step=step, wer_target=evaluate(params))
            result.wer_curve.append(point)
            logger.info("%s step %d WER_target %.4f", label, step, point.wer_target)
    result.skipped_updates = adam.skipped_updates
    return result


def steps_to_threshold(curve: Sequence[WerPoint], threshold: float | None) -> int | None:
    """First evaluated step whose WER_target is at or below ``threshold``."""
    if threshold is None:
        return None
    for point in curve:
        if point.wer_target <= threshold:
            return point.step
    return None
