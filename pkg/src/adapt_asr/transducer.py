"""RNN-T prediction network, joint network, lattice loss and greedy/beam decoding.

The output vocabulary has ``V + 1`` entries; the blank is the last index ``V``
and doubles as the start-of-sequence input of the prediction network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Generic, Protocol, TypeVar

import numpy as np
from scipy import special

from adapt_asr import tensor as T
from adapt_asr.errors import ContractError
from adapt_asr.layers import add_linear, add_mlp, linear, mlp
from adapt_asr.models import ModelConfig, PredictionNetConfig
from adapt_asr.optim import ModelParams, component_rng
from adapt_asr.tensor import Array, Tensor

logger = logging.getLogger(__name__)

PREDICTOR_PREFIX = "predictor"
JOINT_PREFIX = "joint"


# --- Parameters ---


def build_transducer_params(config: ModelConfig, seed: int) -> ModelParams:
    """Prediction network, RNN-T encoder head and joint network."""
    pred = config.predictor
    d = config.encoder.model_dim
    params = ModelParams()
    rng = component_rng(seed, f"{PREDICTOR_PREFIX}.embed")
    embed = rng.normal(0.0, 1.0, size=(config.vocab_size + 1, pred.embed_dim))
    params.add(f"{PREDICTOR_PREFIX}.embed", embed)
    for layer in range(pred.n_layers):
        path = f"{PREDICTOR_PREFIX}.lstm{layer}"
        fan_in = (pred.embed_dim if layer == 0 else pred.proj) + pred.proj
        add_linear(params, f"{path}.gates", fan_in, 4 * pred.hidden, seed)
        bias = params[f"{path}.gates.b"]
        bias.data[pred.hidden : 2 * pred.hidden] = 1.0
        add_linear(params, f"{path}.proj", pred.hidden, pred.proj, seed)
    add_mlp(params, f"{JOINT_PREFIX}.enc_head", [d, d, d], seed)
    add_linear(params, f"{JOINT_PREFIX}.enc_proj", d, config.joint.joint_dim, seed)
    add_linear(params, f"{JOINT_PREFIX}.pred_proj", pred.proj, config.joint.joint_dim, seed)
    add_linear(params, f"{JOINT_PREFIX}.out", config.joint.joint_dim, config.vocab_size + 1, seed)
    return params


# --- Prediction network ---


@dataclass(frozen=True)
class PredictorState:
    """LSTM state after consuming a label history; ``output`` is ``[1, proj]``."""

    h: tuple[Tensor, ...]
    c: tuple[Tensor, ...]
    output: Tensor


def initial_predictor_state(
    params: ModelParams, config: PredictionNetConfig, blank_id: int
) -> PredictorState:
    zeros_h = tuple(Tensor(np.zeros((1, config.proj))) for _ in range(config.n_layers))
    zeros_c = tuple(Tensor(np.zeros((1, config.hidden))) for _ in range(config.n_layers))
    empty = PredictorState(zeros_h, zeros_c, Tensor(np.zeros((1, config.proj))))
    return predictor_step(params, config, empty, blank_id)


def predictor_step(
    params: ModelParams, config: PredictionNetConfig, state: PredictorState, token: int
) -> PredictorState:
    """Feed one label (or the blank as start symbol) through the projected LSTM stack."""
    x = T.embedding_lookup(params[f"{PREDICTOR_PREFIX}.embed"], [token])
    hs: list[Tensor] = []
    cs: list[Tensor] = []
    hidden = config.hidden
    for layer in range(config.n_layers):
        path = f"{PREDICTOR_PREFIX}.lstm{layer}"
        gates = linear(params, f"{path}.gates", T.concat([x, state.h[layer]], axis=1))
        i = T.sigmoid(T.slice_along(gates, 1, 0, hidden))
        f = T.sigmoid(T.slice_along(gates, 1, hidden, 2 * hidden))
        g = T.tanh(T.slice_along(gates, 1, 2 * hidden, 3 * hidden))
        o = T.sigmoid(T.slice_along(gates, 1, 3 * hidden, 4 * hidden))
        c = T.add(T.mul(f, state.c[layer]), T.mul(i, g))
        h = linear(params, f"{path}.proj", T.mul(o, T.tanh(c)))
        hs.append(h)
        cs.append(c)
        x = h
    return PredictorState(tuple(hs), tuple(cs), x)


def predict(
    params: ModelParams, config: PredictionNetConfig, tokens: list[int], blank_id: int
) -> Tensor:
    """Prediction-network outputs ``[U+1, proj]`` for histories ``(), (y1,), ..., (y1..yU)``."""
    state = initial_predictor_state(params, config, blank_id)
    outputs = [state.output]
    for token in tokens:
        state = predictor_step(params, config, state, token)
        outputs.append(state.output)
    return T.concat(outputs, axis=0)


# --- Joint network ---


def encoder_head(params: ModelParams, enc: Tensor) -> Tensor:
    """The two-layer MLP that specialises encoder frames for the RNN-T loss."""
    return mlp(params, f"{JOINT_PREFIX}.enc_head", enc, depth=2)


def joint_logits(params: ModelParams, enc: Tensor, pred: Tensor) -> Tensor:
    """Logits ``[T', U+1, V+1]`` = out(tanh(enc_proj(head(enc_t)) + pred_proj(pred_u)))."""
    if enc.ndim != 2 or pred.ndim != 2:
        msg = f"joint_logits: need enc [T', d] and pred [U+1, p], got {enc.shape}, {pred.shape}"
        raise ContractError(msg)
    e = linear(params, f"{JOINT_PREFIX}.enc_proj", encoder_head(params, enc))
    p = T.matmul(pred, params[f"{JOINT_PREFIX}.pred_proj.w"])
    p = T.add(p, params[f"{JOINT_PREFIX}.pred_proj.b"])
    return linear(params, f"{JOINT_PREFIX}.out", T.tanh(T.outer_add(e, p)))


# --- Lattice loss ---


@dataclass
class LatticePosting:
    """Log-space forward/backward variables over the ``T' x (U+1)`` lattice."""

    log_probs: Array
    alpha: Array
    beta: Array
    log_likelihood_alpha: float
    log_likelihood_beta: float


def lattice_posting(log_probs: Array, targets: list[int], blank_id: int) -> LatticePosting:
    n_frames, n_nodes, width = log_probs.shape
    n_labels = len(targets)
    if n_nodes != n_labels + 1:
        msg = f"rnnt_loss: lattice has {n_nodes} label positions for {n_labels} targets"
        raise ContractError(msg)
    if n_frames == 0:
        msg = f"rnnt_loss: need T' >= 1, got T'=0 with U={n_labels}"
        raise ContractError(msg)
    if any(not 0 <= y < width or y == blank_id for y in targets):
        msg = f"rnnt_loss: targets {targets} must be non-blank ids below {width}"
        raise ContractError(msg)
    blank = log_probs[:, :, blank_id]
    emit = log_probs[:, np.arange(n_labels), targets] if n_labels else np.zeros((n_frames, 0))

    alpha = np.full((n_frames, n_nodes), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(n_frames):
        for u in range(n_nodes):
            if t == 0 and u == 0:
                continue
            from_blank = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            from_emit = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(from_blank, from_emit)

    beta = np.full((n_frames, n_nodes), -np.inf)
    beta[-1, -1] = blank[-1, -1]
    for t in range(n_frames - 1, -1, -1):
        for u in range(n_nodes - 1, -1, -1):
            if t == n_frames - 1 and u == n_labels:
                continue
            via_blank = beta[t + 1, u] + blank[t, u] if t < n_frames - 1 else -np.inf
            via_emit = beta[t, u + 1] + emit[t, u] if u < n_labels else -np.inf
            beta[t, u] = np.logaddexp(via_blank, via_emit)

    return LatticePosting(
        log_probs=log_probs,
        alpha=alpha,
        beta=beta,
        log_likelihood_alpha=float(alpha[-1, -1] + blank[-1, -1]),
        log_likelihood_beta=float(beta[0, 0]),
    )


def lattice_nll(log_probs: Tensor, targets: list[int], blank_id: int) -> Tensor:
    """``-log P(targets)`` summed over all monotonic alignments, from log-probabilities."""
    posting = lattice_posting(log_probs.data, targets, blank_id)
    log_z = posting.log_likelihood_alpha
    n_frames, n_nodes, _ = log_probs.shape

    def grad_fn(g: Array) -> tuple[Array]:
        lp = posting.log_probs
        grad = np.zeros_like(lp)
        alpha, beta = posting.alpha, posting.beta
        next_beta = np.full((n_frames, n_nodes), -np.inf)
        next_beta[:-1] = beta[1:]
        next_beta[-1, -1] = 0.0
        grad[:, :, blank_id] = -np.exp(alpha + lp[:, :, blank_id] + next_beta - log_z)
        for u, y in enumerate(targets):
            grad[:, u, y] = -np.exp(alpha[:, u] + lp[:, u, y] + beta[:, u + 1] - log_z)
        return (float(g) * grad,)

    return T.make_op("rnnt_lattice_nll", (log_probs,), np.asarray(-log_z), grad_fn)


def rnnt_loss(logits: Tensor, targets: list[int], blank_id: int | None = None) -> Tensor:
    """Transducer negative log-likelihood of ``targets`` given ``logits[T', U+1, V+1]``."""
    if logits.ndim != 3:
        msg = f"rnnt_loss: logits must be [T', U+1, V+1], got {logits.shape}"
        raise ContractError(msg)
    if logits.shape[0] == 0:
        msg = f"rnnt_loss: need T' >= 1, got T'=0 with U={len(targets)}"
        raise ContractError(msg)
    blank = logits.shape[2] - 1 if blank_id is None else blank_id
    return lattice_nll(T.log_softmax_lastdim(logits), targets, blank)


# --- Decoding ---

S = TypeVar("S")


class Scorer(Protocol[S]):
    """Next-output distributions over a fixed utterance for a label-history state."""

    @property
    def n_frames(self) -> int: ...

    @property
    def blank_id(self) -> int: ...

    def initial_state(self) -> S: ...

    def advance(self, state: S, token: int) -> S: ...

    def log_probs(self, t: int, state: S) -> Array: ...


@dataclass(frozen=True)
class Emission:
    """One emitted token with the quantities the confidence module consumes."""

    frame: int
    token: int
    log_prob: float
    entropy: float


@dataclass
class Hypothesis(Generic[S]):
    tokens: tuple[int, ...]
    log_prob: float
    state: S
    emissions: tuple[Emission, ...] = field(default_factory=tuple)


class HypothesisList(Generic[S]):
    """Hypotheses keyed by label sequence; re-adding a prefix merges by log-sum-exp."""

    def __init__(self) -> None:
        self._data: dict[tuple[int, ...], Hypothesis[S]] = {}

    def add(self, hyp: Hypothesis[S]) -> None:
        old = self._data.get(hyp.tokens)
        if old is None:
            self._data[hyp.tokens] = hyp
            return
        merged = float(np.logaddexp(old.log_prob, hyp.log_prob))
        keep = hyp if hyp.log_prob > old.log_prob else old
        self._data[hyp.tokens] = Hypothesis(keep.tokens, merged, keep.state, keep.emissions)

    def topk(self, k: int) -> list[Hypothesis[S]]:
        return sorted(self._data.values(), key=lambda h: (-h.log_prob, h.tokens))[:k]

    def __len__(self) -> int:
        return len(self._data)


def _entropy(lp: Array) -> float:
    return float(-(np.exp(lp) * lp).sum())


def greedy_decode(scorer: Scorer[S], max_symbols_per_frame: int = 4) -> Hypothesis[S]:
    """Frame-synchronous argmax decoding.

    At each frame, emit argmax tokens until blank wins; after
    ``max_symbols_per_frame`` emissions the blank is forced. The returned
    ``log_prob`` is that of the single alignment taken.
    """
    state = scorer.initial_state()
    tokens: list[int] = []
    emissions: list[Emission] = []
    score = 0.0
    blank = scorer.blank_id
    for t in range(scorer.n_frames):
        for _ in range(max_symbols_per_frame):
            lp = scorer.log_probs(t, state)
            k = int(np.argmax(lp))
            if k == blank:
                score += float(lp[blank])
                break
            score += float(lp[k])
            tokens.append(k)
            emissions.append(Emission(t, k, float(lp[k]), _entropy(lp)))
            state = scorer.advance(state, k)
        else:
            score += float(scorer.log_probs(t, state)[blank])
    return Hypothesis(tuple(tokens), score, state, tuple(emissions))


def beam_decode(
    scorer: Scorer[S],
    beam_size: int,
    max_symbols_per_frame: int = 4,
    *,
    collect_confidence_inputs: bool = False,
) -> list[Hypothesis[S]]:
    """N-best label sequences, best first, from a frame-synchronous beam search.

    ``beam_size == 1`` is exactly :func:`greedy_decode`. Wider beams expand each
    hypothesis by every token and by blank, merge equal label sequences by
    log-sum-exp and keep the ``beam_size`` best at every expansion layer.
    """
    if beam_size < 1:
        msg = f"beam_decode: beam_size must be >= 1, got {beam_size}"
        raise ContractError(msg)
    if beam_size == 1:
        return [greedy_decode(scorer, max_symbols_per_frame)]

    blank = scorer.blank_id
    start = scorer.initial_state()
    beam: list[Hypothesis[S]] = [Hypothesis((), 0.0, start)]
    for t in range(scorer.n_frames):
        next_frame: HypothesisList[S] = HypothesisList()
        layer = beam
        for n in range(max_symbols_per_frame + 1):
            expanded: HypothesisList[S] = HypothesisList()
            for hyp in layer:
                lp = scorer.log_probs(t, hyp.state)
                blank_score = hyp.log_prob + float(lp[blank])
                next_frame.add(Hypothesis(hyp.tokens, blank_score, hyp.state, hyp.emissions))
                if n == max_symbols_per_frame:
                    continue
                entropy = _entropy(lp) if collect_confidence_inputs else 0.0
                candidates = [k for k in np.argsort(-lp, kind="stable") if k != blank]
                for k in candidates[:beam_size]:
                    token = int(k)
                    expanded.add(
                        Hypothesis(
                            hyp.tokens + (token,),
                            hyp.log_prob + float(lp[token]),
                            scorer.advance(hyp.state, token),
                            hyp.emissions + (Emission(t, token, float(lp[token]), entropy),),
                        )
                    )
            layer = expanded.topk(beam_size)
            if not layer:
                break
        beam = next_frame.topk(beam_size)
    return beam


# --- Scoring with real parameters ---


@dataclass
class TransducerScorer:
    """Scorer over one utterance's encoder output using the trained joint network."""

    params: ModelParams
    config: ModelConfig
    encodings: Array
    _enc_proj: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        with T.no_grad():
            head = encoder_head(self.params, Tensor(self.encodings))
            self._enc_proj = linear(self.params, f"{JOINT_PREFIX}.enc_proj", head).data

    @property
    def n_frames(self) -> int:
        return int(self.encodings.shape[0])

    @property
    def blank_id(self) -> int:
        return self.config.blank_id

    def initial_state(self) -> PredictorState:
        with T.no_grad():
            return initial_predictor_state(self.params, self.config.predictor, self.blank_id)

    def advance(self, state: PredictorState, token: int) -> PredictorState:
        with T.no_grad():
            return predictor_step(self.params, self.config.predictor, state, token)

    def log_probs(self, t: int, state: PredictorState) -> Array:
        w = self.params[f"{JOINT_PREFIX}.pred_proj.w"].data
        b = self.params[f"{JOINT_PREFIX}.pred_proj.b"].data
        hidden = np.tanh(self._enc_proj[t] + state.output.data[0] @ w + b)
        logits = hidden @ self.params[f"{JOINT_PREFIX}.out.w"].data
        logits = logits + self.params[f"{JOINT_PREFIX}.out.b"].data
        lp: Array = logits - special.logsumexp(logits)
        return lp
