"""Word error rate: edit-distance alignment, per-utterance and corpus-level scoring."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from adapt_asr import tensor as T
from adapt_asr.encoder import encode
from adapt_asr.errors import ContractError
from adapt_asr.models import DecodeMode, ModelConfig, WerBreakdown
from adapt_asr.optim import ModelParams
from adapt_asr.synthgen import Utterance
from adapt_asr.tensor import Array
from adapt_asr.transducer import TransducerScorer, beam_decode, greedy_decode

EditKind = Literal["match", "sub", "ins", "del"]


@dataclass(frozen=True)
class AlignedPair:
    """One alignment step; ``hyp_index`` is None for deletions, ``ref_index`` for insertions."""

    kind: EditKind
    hyp_index: int | None
    ref_index: int | None


# --- Alignment ---


def align(hyp: Sequence[int], ref: Sequence[int]) -> list[AlignedPair]:
    """Minimum-cost unit-edit alignment of ``hyp`` against ``ref``.

    Among equal-cost paths the backtrace prefers match, then substitution,
    then insertion, then deletion.
    """
    n, m = len(hyp), len(ref)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diagonal = cost[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1])
            cost[i, j] = min(diagonal, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    pairs: list[AlignedPair] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i, j]
        if i > 0 and j > 0 and hyp[i - 1] == ref[j - 1] and here == cost[i - 1, j - 1]:
            pairs.append(AlignedPair("match", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and here == cost[i - 1, j - 1] + 1:
            pairs.append(AlignedPair("sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and here == cost[i - 1, j] + 1:
            pairs.append(AlignedPair("ins", i - 1, None))
            i -= 1
        else:
            pairs.append(AlignedPair("del", None, j - 1))
            j -= 1
    pairs.reverse()
    return pairs


def wer(hyp: Sequence[int], ref: Sequence[int]) -> WerBreakdown:
    """Edit counts of ``hyp`` against ``ref``; an empty reference divides by 1."""
    counts = {"sub": 0, "ins": 0, "del": 0}
    for pair in align(hyp, ref):
        if pair.kind != "match":
            counts[pair.kind] += 1
    errors = sum(counts.values())
    return WerBreakdown(
        substitutions=counts["sub"],
        insertions=counts["ins"],
        deletions=counts["del"],
        n_ref_tokens=len(ref),
        wer=errors / max(len(ref), 1),
    )


def aggregate(breakdowns: Sequence[WerBreakdown]) -> WerBreakdown:
    """Micro-average: total errors over total reference tokens."""
    if not breakdowns:
        msg = "aggregate: no utterances to score"
        raise ContractError(msg)
    subs = sum(b.substitutions for b in breakdowns)
    ins = sum(b.insertions for b in breakdowns)
    dels = sum(b.deletions for b in breakdowns)
    n_ref = sum(b.n_ref_tokens for b in breakdowns)
    return WerBreakdown(
        substitutions=subs,
        insertions=ins,
        deletions=dels,
        n_ref_tokens=n_ref,
        wer=(subs + ins + dels) / max(n_ref, 1),
    )


# --- Decoding a split ---


def transcribe(
    params: ModelParams,
    config: ModelConfig,
    features: Array,
    *,
    decode: DecodeMode = DecodeMode.GREEDY,
    beam_size: int = 4,
) -> list[int]:
    with T.no_grad():
        encodings = encode(params, features, config.encoder).encodings.data
    scorer = TransducerScorer(params, config, encodings)
    max_symbols = config.joint.max_symbols_per_frame
    if decode == DecodeMode.BEAM:
        best = beam_decode(scorer, beam_size, max_symbols)[0]
    else:
        best = greedy_decode(scorer, max_symbols)
    return list(best.tokens)


def corpus_wer(
    params: ModelParams,
    config: ModelConfig,
    utterances: Sequence[Utterance],
    *,
    decode: DecodeMode = DecodeMode.GREEDY,
    beam_size: int = 4,
) -> WerBreakdown:
    """Decode every utterance and micro-average the errors over the split."""
    if not utterances:
        msg = "corpus_wer: evaluation split is empty"
        raise ContractError(msg)
    hyps = [
        transcribe(params, config, u.features, decode=decode, beam_size=beam_size)
        for u in utterances
    ]
    return aggregate([wer(hyp, u.tokens) for hyp, u in zip(hyps, utterances, strict=True)])
