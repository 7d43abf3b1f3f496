"""Tests for WER alignment and corpus-level scoring."""

from functools import cache

import numpy as np
import pytest

from adapt_asr.errors import ContractError
from adapt_asr.models import DecodeMode, ExperimentSpec, ModelConfig
from adapt_asr.optim import ModelParams
from adapt_asr.pipeline import build_model_params, model_config
from adapt_asr.scoring import aggregate, align, corpus_wer, transcribe, wer
from adapt_asr.synthgen import Corpus


def edit_distance(hyp: tuple[int, ...], ref: tuple[int, ...]) -> int:
    """Recursive Levenshtein distance, written independently of the scorer."""

    @cache
    def dist(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return i + j
        return min(
            dist(i - 1, j - 1) + (hyp[i - 1] != ref[j - 1]),
            dist(i - 1, j) + 1,
            dist(i, j - 1) + 1,
        )

    return dist(len(hyp), len(ref))


class TestWer:
    def test_identical(self) -> None:
        assert wer([1, 2, 3], [1, 2, 3]).wer == 0.0

    def test_single_substitution(self) -> None:
        out = wer([0, 9, 2], [0, 1, 2])
        assert out.substitutions == 1
        assert out.wer == pytest.approx(1 / 3)

    def test_insertion_and_deletion(self) -> None:
        assert wer([1, 2, 3], [1, 3]).insertions == 1
        assert wer([1], [1, 3]).deletions == 1

    def test_empty_reference(self) -> None:
        assert wer([], []).wer == 0.0
        assert wer([4, 5], []).wer == 2.0

    def test_zero_only_when_equal(self) -> None:
        assert wer([1, 2], [2, 1]).wer > 0

    def test_tie_break_prefers_substitution_over_indel(self) -> None:
        kinds = [p.kind for p in align([7], [8])]
        assert kinds == ["sub"]

    def test_matches_independent_oracle(self) -> None:
        rng = np.random.default_rng(0)
        for _ in range(1000):
            hyp = tuple(int(x) for x in rng.integers(0, 4, size=rng.integers(0, 8)))
            ref = tuple(int(x) for x in rng.integers(0, 4, size=rng.integers(0, 8)))
            out = wer(hyp, ref)
            assert out.errors == edit_distance(hyp, ref)
            assert out.n_ref_tokens == len(ref)

    def test_relabeling_symmetry(self) -> None:
        rng = np.random.default_rng(1)
        perm = rng.permutation(6)
        for _ in range(50):
            hyp = [int(x) for x in rng.integers(0, 6, size=5)]
            ref = [int(x) for x in rng.integers(0, 6, size=6)]
            mapped = wer([int(perm[x]) for x in hyp], [int(perm[x]) for x in ref])
            assert mapped.errors == wer(hyp, ref).errors


class TestAggregate:
    def test_micro_not_macro(self) -> None:
        short = wer([9], [1])
        long = wer(list(range(9)), list(range(9)))
        total = aggregate([short, long])
        macro = (short.wer + long.wer) / 2
        assert total.wer == pytest.approx(0.1)
        assert macro == pytest.approx(0.5)

    def test_empty_rejected(self) -> None:
        with pytest.raises(ContractError, match="no utterances"):
            aggregate([])


class TestCorpusWer:
    def _model(self, spec: ExperimentSpec, corpus: Corpus) -> tuple[ModelParams, ModelConfig]:
        config = model_config(spec, corpus, spec.student)
        return build_model_params(config, seed=0), config

    def test_single_utterance(self, spec: ExperimentSpec, corpus: Corpus) -> None:
        params, config = self._model(spec, corpus)
        utt = corpus.split("eval_MF")[0]
        hyp = transcribe(params, config, utt.features)
        assert corpus_wer(params, config, [utt]) == wer(hyp, utt.tokens)

    def test_duplicated_split(self, spec: ExperimentSpec, corpus: Corpus) -> None:
        params, config = self._model(spec, corpus)
        utts = corpus.split("eval_MF")
        once = corpus_wer(params, config, utts)
        twice = corpus_wer(params, config, utts + utts)
        assert twice.wer == pytest.approx(once.wer)

    def test_order_invariant(self, spec: ExperimentSpec, corpus: Corpus) -> None:
        params, config = self._model(spec, corpus)
        utts = corpus.split("eval_SF")
        forward = corpus_wer(params, config, utts, decode=DecodeMode.BEAM, beam_size=2)
        backward = corpus_wer(params, config, utts[::-1], decode=DecodeMode.BEAM, beam_size=2)
        assert forward == backward

    def test_empty_split(self, spec: ExperimentSpec, corpus: Corpus) -> None:
        params, config = self._model(spec, corpus)
        with pytest.raises(ContractError, match="empty"):
            corpus_wer(params, config, [])
