"""Tests for the synthetic corpus generator and the corpus file format."""

from pathlib import Path

import numpy as np
import pytest

from adapt_asr.errors import ConfigError, ContractError, CorpusFormatError, DependencyError
from adapt_asr.models import LabelKind, SplitManifest
from adapt_asr.synthgen import (
    CORPUS_FILENAME,
    Corpus,
    Utterance,
    decode_corpus,
    encode_corpus,
    generate,
    label_fraction_ids,
    label_fraction_split,
    measured_tv_distance,
    read_corpus,
    stack_frames,
    token_priors,
    write_corpus,
)
from tests.conftest import tiny_corpus_spec


class TestStackFrames:
    def test_shape(self) -> None:
        out = stack_frames(np.zeros((12, 2)), stack=4, subsample=3)
        assert out.shape == (4, 8)

    def test_constant_input(self) -> None:
        out = stack_frames(np.full((12, 2), 1.5))
        np.testing.assert_array_equal(out[:3], 1.5)

    def test_matches_hand_indexing(self) -> None:
        x = np.random.default_rng(0).normal(size=(10, 3))
        out = stack_frames(x, stack=4, subsample=3)
        assert out.shape == (4, 12)
        for i in range(4):
            for j in range(4):
                row = 3 * i + j
                expected = x[row] if row < 10 else np.zeros(3)
                np.testing.assert_array_equal(out[i, 3 * j : 3 * j + 3], expected)

    def test_empty_input_rejected(self) -> None:
        with pytest.raises(ContractError):
            stack_frames(np.zeros((0, 2)))


class TestUtterance:
    def test_domain_outside_range(self) -> None:
        with pytest.raises(ContractError, match="domain id"):
            Utterance("u", np.zeros((2, 3)), [1], domain_id=4, n_domains=4)

    def test_confidence_only_for_pseudo_labels(self) -> None:
        with pytest.raises(ContractError, match="confidence"):
            Utterance("u", np.zeros((2, 3)), [1], domain_id=0, confidence=0.5)
        utt = Utterance("u", np.zeros((2, 3)), [1], domain_id=0)
        pseudo = utt.relabeled([2, 3], LabelKind.PSEUDO, 0.9)
        assert pseudo.tokens == [2, 3]
        assert utt.tokens == [1]


class TestGenerate:
    def test_pure_function_of_spec(self, corpus: Corpus) -> None:
        again = generate(tiny_corpus_spec())
        assert again.manifest == corpus.manifest
        for utt_id, utt in corpus.utterances.items():
            assert np.array_equal(again.utterances[utt_id].features, utt.features)
            assert again.utterances[utt_id].tokens == utt.tokens

    def test_seed_changes_corpus(self, corpus: Corpus) -> None:
        other = generate(tiny_corpus_spec(seed=8))
        first = next(iter(corpus.utterances))
        ours = corpus.utterances[first].features
        assert not np.array_equal(other.utterances[first].features, ours)

    def test_split_sizes(self) -> None:
        spec = tiny_corpus_spec(n_source=100, n_target=100, target_label_fraction=0.03)
        corpus = generate(spec)
        manifest = corpus.manifest
        assert len(manifest.md_3p) - len(manifest.md_src) == 3
        assert len(manifest.mf_labeled) == 3
        assert len(manifest.mf_unlabeled) == 97
        assert len(manifest.md) == 200

    def test_unlabeled_target_marked(self, corpus: Corpus) -> None:
        for utt in corpus.split("MF_unlabeled"):
            assert utt.label_kind == LabelKind.NONE
        for utt in corpus.split("MF_labeled"):
            assert utt.label_kind == LabelKind.HUMAN

    def test_input_width_includes_domain_one_hot(self, corpus: Corpus) -> None:
        spec = corpus.spec
        for utt in corpus.utterances.values():
            assert utt.features.shape[1] == spec.input_dim
            np.testing.assert_array_equal(utt.features[:, spec.acoustic_dim :], utt.domain_one_hot)

    def test_target_utterances_are_longer(self, corpus: Corpus) -> None:
        source = np.mean([u.n_frames for u in corpus.split("MD_src")])
        target = np.mean([u.n_frames for u in corpus.split("MF")])
        assert target > 2 * source

    def test_noiseless_identical_sequences_match(self) -> None:
        priors = ([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0])
        spec = tiny_corpus_spec(
            vocab_size=4,
            domain_token_priors=priors,
            source_len_range=(6, 6),
            noise_sigma=0.0,
            n_target=2,
        )
        corpus = generate(spec)
        first, second = corpus.split("MD_src")[:2]
        assert first.tokens == second.tokens
        assert np.array_equal(first.features, second.features)

    def test_default_priors_are_far_apart(self) -> None:
        spec = tiny_corpus_spec(vocab_size=32)
        source, target = token_priors(spec, np.random.default_rng(0))
        assert measured_tv_distance(source, target, np.random.default_rng(1)) >= 0.3

    def test_close_priors_rejected(self) -> None:
        uniform = [1.0] * 6
        spec = tiny_corpus_spec(domain_token_priors=(uniform, uniform), min_tv_distance=0.3)
        with pytest.raises(ConfigError, match="TV distance"):
            generate(spec)

    def test_small_vocabulary_rejected(self) -> None:
        with pytest.raises(ConfigError, match="vocab_size"):
            generate(tiny_corpus_spec(vocab_size=3))

    def test_unknown_split(self, corpus: Corpus) -> None:
        with pytest.raises(ConfigError, match="Unknown split"):
            corpus.split("MF_everything")


class TestLabelFractions:
    def test_nested(self) -> None:
        manifest = SplitManifest(md_src=["s0"], mf=[f"t{i}" for i in range(10)])
        small = label_fraction_ids(manifest, 0.3)
        large = label_fraction_ids(manifest, 0.6)
        assert small == large[: len(small)]
        assert label_fraction_split(manifest, 0.0) == ["s0"]
        assert label_fraction_split(manifest, 1.0) == ["s0", *manifest.mf]

    def test_out_of_range(self) -> None:
        with pytest.raises(ConfigError):
            label_fraction_ids(SplitManifest(), 1.5)


class TestCorpusFile:
    def test_round_trip(self, corpus: Corpus, tmp_path: Path) -> None:
        write_corpus(corpus, tmp_path)
        loaded = read_corpus(tmp_path)
        assert loaded.manifest == corpus.manifest
        assert loaded.spec == corpus.spec
        for utt_id, utt in corpus.utterances.items():
            other = loaded.utterances[utt_id]
            assert np.array_equal(other.features, utt.features)
            assert other.tokens == utt.tokens
            assert other.label_kind == utt.label_kind

    def test_empty_corpus(self, tmp_path: Path) -> None:
        spec = tiny_corpus_spec(n_source=0, n_target=0, n_eval_source=0, n_eval_target=0)
        write_corpus(generate(spec), tmp_path)
        assert read_corpus(tmp_path).utterances == {}

    def test_corrupted_magic(self, corpus: Corpus) -> None:
        blob = bytearray(encode_corpus(list(corpus.utterances.values()), 6, 4))
        blob[:4] = b"XXXX"
        with pytest.raises(CorpusFormatError, match="magic"):
            decode_corpus(bytes(blob))

    def test_truncated(self, corpus: Corpus) -> None:
        blob = encode_corpus(list(corpus.utterances.values()), 6, 4)
        with pytest.raises(CorpusFormatError, match="truncated"):
            decode_corpus(blob[:-5])

    def test_trailing_bytes(self, corpus: Corpus) -> None:
        blob = encode_corpus(list(corpus.utterances.values())[:2], 6, 4)
        with pytest.raises(CorpusFormatError, match="trailing"):
            decode_corpus(blob + b"\x00")

    def test_missing_corpus(self, tmp_path: Path) -> None:
        with pytest.raises(DependencyError, match="gen-data"):
            read_corpus(tmp_path)

    def test_header_disagrees_with_spec(self, corpus: Corpus, tmp_path: Path) -> None:
        write_corpus(corpus, tmp_path)
        blob = encode_corpus(list(corpus.utterances.values()), 7, 4)
        (tmp_path / CORPUS_FILENAME).write_bytes(blob)
        with pytest.raises(CorpusFormatError, match="disagrees"):
            read_corpus(tmp_path)
