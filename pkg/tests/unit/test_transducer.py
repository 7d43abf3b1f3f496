"""Tests for the transducer loss, prediction network and decoders."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import pytest
from scipy import special

from adapt_asr import tensor as T
from adapt_asr.errors import ContractError
from adapt_asr.models import ModelConfig
from adapt_asr.tensor import Array, Tensor, gradcheck
from adapt_asr.transducer import (
    TransducerScorer,
    beam_decode,
    build_transducer_params,
    greedy_decode,
    joint_logits,
    lattice_posting,
    predict,
    rnnt_loss,
)
from tests.conftest import brute_force_nll, random_lattice, tiny_encoder


SMALL_LATTICES = [(t, u) for t in range(1, 8) for u in range(0, 8) if t + u <= 8]
DRAWS = 100


class TestRnntLoss:
    def test_single_blank(self) -> None:
        loss = rnnt_loss(Tensor(np.zeros((1, 1, 3))), [])
        assert loss.item() == pytest.approx(np.log(3.0), abs=1e-12)

    def test_two_paths(self) -> None:
        loss = rnnt_loss(Tensor(np.zeros((2, 2, 3))), [0])
        assert loss.item() == pytest.approx(-np.log(2 * (1 / 3) ** 3), abs=1e-12)
        assert loss.item() == pytest.approx(2.6027, abs=1e-4)

    @pytest.mark.parametrize(("n_frames", "n_labels"), SMALL_LATTICES)
    def test_matches_path_enumeration(self, n_frames: int, n_labels: int) -> None:
        rng = np.random.default_rng([n_frames, n_labels])
        for _ in range(DRAWS):
            logits, targets = random_lattice(rng, n_frames, n_labels)
            loss = rnnt_loss(Tensor(logits), targets).item()
            assert loss == pytest.approx(brute_force_nll(logits, targets, 3), abs=1e-9)

    def test_forward_backward_agree(self) -> None:
        rng = np.random.default_rng(1)
        logits, targets = random_lattice(rng, 5, 3)
        lp = logits - special.logsumexp(logits, axis=-1, keepdims=True)
        posting = lattice_posting(lp, targets, 3)
        assert posting.log_likelihood_alpha == pytest.approx(posting.log_likelihood_beta, abs=1e-9)

    @pytest.mark.parametrize(("n_frames", "n_labels"), SMALL_LATTICES)
    def test_gradcheck(self, n_frames: int, n_labels: int) -> None:
        rng = np.random.default_rng([n_frames, n_labels, 2])
        for _ in range(DRAWS):
            logits, targets = random_lattice(rng, n_frames, n_labels, width=3)
            leaf = Tensor(logits, requires_grad=True)
            assert gradcheck(lambda: rnnt_loss(leaf, targets), [leaf]) < 1e-5

    def test_relabeling_covariance(self) -> None:
        rng = np.random.default_rng(3)
        logits, targets = random_lattice(rng, 4, 3, width=5)
        perm = np.array([2, 0, 3, 1])
        relabeled = logits.copy()
        relabeled[:, :, perm] = logits[:, :, :4]
        mapped = [int(perm[y]) for y in targets]
        a = rnnt_loss(Tensor(logits), targets).item()
        b = rnnt_loss(Tensor(relabeled), mapped).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_contract_errors(self) -> None:
        with pytest.raises(ContractError, match="T'"):
            rnnt_loss(Tensor(np.zeros((0, 2, 3))), [0])
        with pytest.raises(ContractError, match="label positions"):
            rnnt_loss(Tensor(np.zeros((2, 2, 3))), [0, 1])
        with pytest.raises(ContractError, match="non-blank"):
            rnnt_loss(Tensor(np.zeros((2, 2, 3))), [2])


def _tiny_model_config() -> ModelConfig:
    from adapt_asr.models import JointConfig, PredictionNetConfig

    return ModelConfig(
        input_dim=10,
        vocab_size=5,
        encoder=tiny_encoder(),
        predictor=PredictionNetConfig(embed_dim=4, hidden=6, proj=4),
        joint=JointConfig(joint_dim=6, max_symbols_per_frame=2),
    )


class TestJointNetwork:
    def test_shapes(self) -> None:
        config = _tiny_model_config()
        params = build_transducer_params(config, seed=0)
        pred = predict(params, config.predictor, [1, 2], config.blank_id)
        assert pred.shape == (3, config.predictor.proj)
        logits = joint_logits(params, Tensor(np.zeros((1, 8))), pred)
        assert logits.shape == (1, 3, config.vocab_size + 1)

    def test_zero_params_give_uniform_distribution(self) -> None:
        config = _tiny_model_config()
        params = build_transducer_params(config, seed=0)
        for _, tensor in params.items():
            tensor.data = np.zeros_like(tensor.data)
        pred = predict(params, config.predictor, [], config.blank_id)
        logits = joint_logits(params, Tensor(np.ones((2, 8))), pred)
        np.testing.assert_array_equal(logits.data, 0.0)
        probs = T.softmax_lastdim(logits).data
        np.testing.assert_allclose(probs, 1 / 6)

    def test_gradcheck_through_joint_and_predictor(self) -> None:
        config = _tiny_model_config()
        params = build_transducer_params(config, seed=1)
        enc = Tensor(np.random.default_rng(0).normal(size=(3, 8)), requires_grad=True)
        leaves = [enc, params["joint.out.w"], params["predictor.embed"]]

        def fn() -> Tensor:
            pred = predict(params, config.predictor, [1, 4], config.blank_id)
            return rnnt_loss(joint_logits(params, enc, pred), [1, 4], config.blank_id)

        assert gradcheck(fn, leaves) < 1e-5

    def test_scorer_matches_joint_logits(self) -> None:
        config = _tiny_model_config()
        params = build_transducer_params(config, seed=2)
        enc = np.random.default_rng(1).normal(size=(3, 8))
        scorer = TransducerScorer(params, config, enc)
        state = scorer.advance(scorer.initial_state(), 3)
        with T.no_grad():
            pred = predict(params, config.predictor, [3], config.blank_id)
            logits = joint_logits(params, Tensor(enc), pred).data
        expected = logits[2, 1] - special.logsumexp(logits[2, 1])
        np.testing.assert_allclose(scorer.log_probs(2, state), expected, atol=1e-12)


# --- Decoding against scripted and random scorers ---


@dataclass
class ScriptedScorer:
    """Emits ``token`` once per frame, then blank; or blank everywhere when token is None."""

    n_frames: int
    token: int | None
    blank_id: int = 3

    def initial_state(self) -> tuple[int, ...]:
        return ()

    def advance(self, state: tuple[int, ...], token: int) -> tuple[int, ...]:
        return (*state, token)

    def log_probs(self, t: int, state: tuple[int, ...]) -> Array:
        favoured = self.blank_id
        if self.token is not None and len(state) <= t:
            favoured = self.token
        lp = np.full(self.blank_id + 1, np.log(0.1 / self.blank_id))
        lp[favoured] = np.log(0.9)
        return lp


@dataclass
class TableScorer:
    """Random next-output distributions keyed by (frame, label history)."""

    n_frames: int
    seed: int
    blank_id: int = 3

    def initial_state(self) -> tuple[int, ...]:
        return ()

    def advance(self, state: tuple[int, ...], token: int) -> tuple[int, ...]:
        return (*state, token)

    def log_probs(self, t: int, state: tuple[int, ...]) -> Array:
        rng = np.random.default_rng([self.seed, t, len(state), *state])
        logits = rng.normal(scale=2.0, size=self.blank_id + 1)
        lp: Array = logits - special.logsumexp(logits)
        return lp


def exhaustive_best(scorer: TableScorer, max_symbols: int) -> tuple[tuple[int, ...], float]:
    """Most probable label sequence, summing every alignment under the per-frame cap."""
    totals: dict[tuple[int, ...], list[float]] = {}
    tokens = range(scorer.blank_id)

    def walk(t: int, history: tuple[int, ...], score: float) -> None:
        if t == scorer.n_frames:
            totals.setdefault(history, []).append(score)
            return
        for n in range(max_symbols + 1):
            for emitted in itertools.product(tokens, repeat=n):
                s = score
                h = history
                for y in emitted:
                    s += float(scorer.log_probs(t, h)[y])
                    h = (*h, y)
                walk(t + 1, h, s + float(scorer.log_probs(t, h)[scorer.blank_id]))

    walk(0, (), 0.0)
    merged = {h: float(special.logsumexp(v)) for h, v in totals.items()}
    best = max(merged, key=lambda h: merged[h])
    return best, merged[best]


class TestDecoding:
    def test_blank_everywhere_gives_empty(self) -> None:
        hyp = greedy_decode(ScriptedScorer(n_frames=4, token=None))
        assert hyp.tokens == ()

    def test_one_token_per_frame(self) -> None:
        hyp = greedy_decode(ScriptedScorer(n_frames=3, token=1))
        assert hyp.tokens == (1, 1, 1)
        assert [e.frame for e in hyp.emissions] == [0, 1, 2]

    def test_symbol_cap_forces_progress(self) -> None:
        @dataclass
        class Stuck(ScriptedScorer):
            def log_probs(self, t: int, state: tuple[int, ...]) -> Array:
                lp = np.full(4, np.log(0.1 / 3))
                lp[0] = np.log(0.9)
                return lp

        hyp = greedy_decode(Stuck(n_frames=3, token=0), max_symbols_per_frame=2)
        assert len(hyp.tokens) == 6

    def test_beam_one_is_greedy(self) -> None:
        scorer = TableScorer(n_frames=4, seed=5)
        greedy = greedy_decode(scorer, 2)
        (beam,) = beam_decode(scorer, 1, 2)
        assert beam.tokens == greedy.tokens
        assert beam.log_prob == greedy.log_prob

    def test_nbest_sorted(self) -> None:
        hyps = beam_decode(TableScorer(n_frames=4, seed=6), 4, 2)
        scores = [h.log_prob for h in hyps]
        assert scores == sorted(scores, reverse=True)

    def test_invalid_beam(self) -> None:
        with pytest.raises(ContractError):
            beam_decode(TableScorer(n_frames=2, seed=0), 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_width_beam_finds_argmax(self, seed: int) -> None:
        scorer = TableScorer(n_frames=3, seed=seed)
        best, log_prob = exhaustive_best(scorer, max_symbols=1)
        top = beam_decode(scorer, 64, 1)[0]
        assert top.tokens == best
        assert top.log_prob == pytest.approx(log_prob, abs=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_greedy_never_beats_beam(self, seed: int) -> None:
        scorer = TableScorer(n_frames=3, seed=100 + seed)
        greedy = greedy_decode(scorer, 1)
        best = beam_decode(scorer, 64, 1)[0]
        assert greedy.log_prob <= best.log_prob + 1e-12

    def test_confidence_inputs_collected(self) -> None:
        hyp = beam_decode(TableScorer(n_frames=3, seed=7), 4, 2, collect_confidence_inputs=True)[0]
        assert len(hyp.emissions) == len(hyp.tokens)
        for emission in hyp.emissions:
            assert emission.entropy > 0
            assert emission.log_prob < 0
