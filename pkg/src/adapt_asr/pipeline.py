"""Adaptation recipes: supervised baselines, self-sup pre-training and fine-tuning,
joint training, teacher training, pseudo-labeling and noisy-student training.

Every recipe is a deterministic function of (ExperimentSpec, corpus, seed).
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from adapt_asr import tensor as T
from adapt_asr.confidence import (
    FilterResult,
    build_cem_params,
    cem_forward,
    confidence_loss,
    confidence_targets,
    emission_features,
    filter_utterances,
    pseudo_label_wer,
    score_hypothesis,
    write_manifest,
)
from adapt_asr.encoder import ENCODER_PREFIX, build_encoder_params, encode, validate_encoder_config
from adapt_asr.errors import ConfigError, ContractError, CorpusFormatError, EmptySelectionError
from adapt_asr.models import (
    Algorithm,
    AugmentConfig,
    DataSplit,
    EncoderConfig,
    ExperimentSpec,
    FilterStats,
    LabelKind,
    ModelConfig,
    PseudoLabelRecord,
    PseudoLabelSource,
    RunReport,
    RunStatus,
    SelfSupKind,
    WerBreakdown,
)
from adapt_asr.optim import ModelParams, load_checkpoint, save_checkpoint
from adapt_asr.scoring import corpus_wer
from adapt_asr.selfsup import (
    build_selfsup_params,
    joint_loss,
    selfsup_pass,
    validate_selfsup_config,
)
from adapt_asr.synthgen import Corpus, Utterance, label_fraction_ids, label_fraction_split
from adapt_asr.tensor import Array, Tensor
from adapt_asr.training import (
    Evaluator,
    TrainResult,
    UtteranceLoss,
    steps_to_threshold,
    train_loop,
)
from adapt_asr.transducer import (
    TransducerScorer,
    beam_decode,
    build_transducer_params,
    joint_logits,
    predict,
    rnnt_loss,
)

logger = logging.getLogger(__name__)

AUDIT_FILENAME = "nst_audit.json"

# Stream ids keep batch order of one stage independent of every other stage.
MAIN_STREAM = 0
PRETRAIN_STREAM = 1
TEACHER_STREAM = 2

_NST_ALGORITHMS = (Algorithm.SEMISUP_NST, Algorithm.SELF_PLUS_SEMI, Algorithm.JOINT_PLUS_NST)
_PRETRAIN_ALGORITHMS = (Algorithm.SELFSUP_PRETRAIN_FINETUNE, Algorithm.SELF_PLUS_SEMI)
_JOINT_ALGORITHMS = (Algorithm.JOINT_SELFSUP, Algorithm.JOINT_PLUS_NST)


# --- Validation ---


def uses_selfsup(spec: ExperimentSpec) -> bool:
    return spec.algorithm in _PRETRAIN_ALGORITHMS + _JOINT_ALGORITHMS


def validate_experiment(spec: ExperimentSpec) -> None:
    """Reject configurations the recipes cannot run faithfully."""
    for encoder in (spec.student, spec.teacher, spec.pretrain_encoder):
        if encoder is not None:
            validate_encoder_config(encoder)
    if not spec.student.is_causal:
        msg = (
            f"{spec.name}: the student encoder must be causal "
            f"(right_context={spec.student.right_context}, causal_conv={spec.student.causal_conv})"
        )
        raise ConfigError(msg)
    if spec.algorithm in _NST_ALGORITHMS:
        if spec.teacher.is_causal:
            msg = f"{spec.name}: the teacher encoder must see future frames"
            raise ConfigError(msg)
        if spec.data_split == DataSplit.MD:
            msg = f"{spec.name}: split MD leaves no unlabeled target data for pseudo-labeling"
            raise ConfigError(msg)
    validate_selfsup_config(spec.selfsup)
    if spec.algorithm in _PRETRAIN_ALGORITHMS and spec.selfsup.kind == SelfSupKind.WAV2VEC2:
        pre = spec.pretrain_encoder
        if pre is None or pre.right_context == 0:
            msg = (
                f"{spec.name}: two-stage wav2vec2 does not converge on a causal encoder; "
                "set pretrain_encoder with right_context > 0 or use joint training"
            )
            raise ConfigError(msg)
    if spec.pretrain_encoder is not None:
        geometry = ("n_blocks", "model_dim", "n_heads", "conv_kernel", "ff_expansion")
        mismatched = [
            k for k in geometry if getattr(spec.pretrain_encoder, k) != getattr(spec.student, k)
        ]
        if mismatched:
            msg = f"{spec.name}: pretrain_encoder differs from the student in {mismatched}"
            raise ConfigError(msg)
    if not 0.0 <= spec.confidence_threshold <= 1.0:
        msg = f"{spec.name}: confidence threshold {spec.confidence_threshold} outside [0, 1]"
        raise ConfigError(msg)
    budget = spec.training
    for stage in ("steps", "pretrain_steps", "teacher_steps"):
        if getattr(budget, stage) > budget.max_steps:
            msg = f"{spec.name}: {stage}={getattr(budget, stage)} exceeds {budget.max_steps}"
            raise ConfigError(msg)
    if spec.data_split == DataSplit.SWEEP:
        if spec.label_fraction is None or not 0.0 <= spec.label_fraction <= 1.0:
            msg = f"{spec.name}: the sweep split needs a label_fraction in [0, 1]"
            raise ConfigError(msg)


# --- Data pools ---


def labeled_pool(spec: ExperimentSpec, corpus: Corpus) -> list[Utterance]:
    manifest = corpus.manifest
    if spec.data_split == DataSplit.SWEEP:
        ids = label_fraction_split(manifest, spec.label_fraction or 0.0)
    else:
        ids = manifest.get_split(spec.data_split.value)
    return [u.relabeled(u.tokens, LabelKind.HUMAN) for u in corpus.get(ids)]


def unlabeled_pool(spec: ExperimentSpec, corpus: Corpus) -> list[Utterance]:
    """Target-domain utterances whose transcripts the recipe may not train on."""
    manifest = corpus.manifest
    if spec.data_split == DataSplit.MD_SRC:
        ids = manifest.mf
    elif spec.data_split == DataSplit.MD_3P:
        ids = manifest.mf_unlabeled
    elif spec.data_split == DataSplit.SWEEP:
        labeled = set(label_fraction_ids(manifest, spec.label_fraction or 0.0))
        ids = [i for i in manifest.mf if i not in labeled]
    else:
        ids = []
    return corpus.get(ids)


# --- Model construction and persistence ---


def model_config(
    spec: ExperimentSpec,
    corpus: Corpus,
    encoder: EncoderConfig,
    *,
    with_selfsup: bool = False,
    with_cem: bool = False,
) -> ModelConfig:
    return ModelConfig(
        input_dim=corpus.spec.input_dim,
        vocab_size=corpus.spec.vocab_size,
        n_domains=corpus.spec.n_domains,
        encoder=encoder,
        predictor=spec.predictor,
        joint=spec.joint,
        selfsup=spec.selfsup if with_selfsup else None,
        cem=spec.cem if with_cem else None,
    )


def build_model_params(config: ModelConfig, seed: int, *, transducer: bool = True) -> ModelParams:
    """Encoder plus transducer, with self-sup heads and CEM when configured."""
    d = config.encoder.model_dim
    params = build_encoder_params(config.encoder, config.input_dim, seed)
    if transducer:
        params.update(build_transducer_params(config, seed))
    if config.selfsup is not None:
        params.update(build_selfsup_params(config.selfsup, d, config.acoustic_dim, seed))
    if config.cem is not None:
        params.update(build_cem_params(config.cem, d, config.predictor.embed_dim, seed))
    return params


def save_model(
    params: ModelParams, config: ModelConfig, path: Path, **metadata: Any
) -> Path:
    meta = {"model_config": config.model_dump(mode="json", by_alias=True), **metadata}
    return save_checkpoint(params, path, meta)


def load_model(path: Path) -> tuple[ModelParams, ModelConfig, dict[str, Any]]:
    params, meta = load_checkpoint(path)
    if "model_config" not in meta:
        msg = f"{path}: checkpoint has no model_config"
        raise CorpusFormatError(msg)
    return params, ModelConfig.model_validate(meta["model_config"]), meta


# --- Per-utterance losses ---


def transducer_loss(
    params: ModelParams, config: ModelConfig, encodings: Tensor, tokens: list[int]
) -> Tensor:
    pred = predict(params, config.predictor, tokens, config.blank_id)
    return rnnt_loss(joint_logits(params, encodings, pred), tokens, config.blank_id)


def augment_features(
    features: Array, config: AugmentConfig, acoustic_dim: int, rng: np.random.Generator
) -> Array:
    """Zero random time spans and add Gaussian noise on the acoustic columns only."""
    out = np.array(features, dtype=np.float64)
    n_frames = out.shape[0]
    max_width = int(np.floor(config.max_mask_fraction * n_frames))
    for _ in range(config.n_time_masks):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[start : start + width, :acoustic_dim] = 0.0
    if config.noise_sigma > 0:
        out[:, :acoustic_dim] += config.noise_sigma * rng.normal(size=(n_frames, acoustic_dim))
    return out


def supervised_loss(config: ModelConfig) -> UtteranceLoss:
    def loss_fn(
        params: ModelParams, utt: Utterance, rng: np.random.Generator, step: int
    ) -> Tensor:
        enc = encode(params, utt.features, config.encoder).encodings
        return transducer_loss(params, config, enc, utt.tokens)

    return loss_fn


def selfsup_only_loss(config: ModelConfig) -> UtteranceLoss:
    if config.selfsup is None:
        msg = "selfsup_only_loss: model has no self-sup head"
        raise ContractError(msg)
    ss = config.selfsup

    def loss_fn(
        params: ModelParams, utt: Utterance, rng: np.random.Generator, step: int
    ) -> Tensor | None:
        return selfsup_pass(params, utt.features, config.encoder, ss, config.acoustic_dim, rng).loss

    return loss_fn


def joint_training_loss(config: ModelConfig) -> UtteranceLoss:
    """RNN-T plus lambda-weighted self-sup loss from one shared encoder pass."""
    if config.selfsup is None:
        msg = "joint_training_loss: model has no self-sup head"
        raise ContractError(msg)
    ss = config.selfsup
    if ss.lambda_ == 0:
        return supervised_loss(config)

    def loss_fn(
        params: ModelParams, utt: Utterance, rng: np.random.Generator, step: int
    ) -> Tensor:
        ss_pass = selfsup_pass(params, utt.features, config.encoder, ss, config.acoustic_dim, rng)
        l_rnnt = transducer_loss(params, config, ss_pass.encodings, utt.tokens)
        return joint_loss(l_rnnt, ss_pass.loss, ss.lambda_)

    return loss_fn


def augmented(loss: UtteranceLoss, config: AugmentConfig, acoustic_dim: int) -> UtteranceLoss:
    """Wrap a loss so the student sees noisy inputs."""

    def loss_fn(
        params: ModelParams, utt: Utterance, rng: np.random.Generator, step: int
    ) -> Tensor | None:
        noisy = augment_features(utt.features, config, acoustic_dim, rng)
        return loss(params, replace(utt, features=noisy), rng, step)

    return loss_fn


def teacher_loss(config: ModelConfig) -> UtteranceLoss:
    """RNN-T loss plus the weighted confidence loss on the current best hypothesis."""
    if config.cem is None:
        msg = "teacher_loss: model has no confidence module"
        raise ContractError(msg)
    cem = config.cem

    def loss_fn(
        params: ModelParams, utt: Utterance, rng: np.random.Generator, step: int
    ) -> Tensor:
        enc = encode(params, utt.features, config.encoder).encodings
        loss = transducer_loss(params, config, enc, utt.tokens)
        if cem.weight == 0 or step <= cem.start_step:
            return loss
        scorer = TransducerScorer(params, config, enc.data)
        best = beam_decode(
            scorer,
            cem.train_beam_size,
            config.joint.max_symbols_per_frame,
            collect_confidence_inputs=True,
        )[0]
        if not best.emissions:
            return loss
        p = cem_forward(params, emission_features(params, enc.data, best.emissions))
        l_cem = confidence_loss(p, confidence_targets(best.tokens, utt.tokens))
        return T.add(loss, T.scale(l_cem, cem.weight))

    return loss_fn


# --- Evaluation ---


def evaluate(
    params: ModelParams, config: ModelConfig, spec: ExperimentSpec, corpus: Corpus
) -> tuple[WerBreakdown, WerBreakdown]:
    """(target, source) WER on eval_MF and eval_SF."""
    kwargs: dict[str, Any] = {"decode": spec.decode, "beam_size": spec.beam_size}
    target = corpus_wer(params, config, corpus.split("eval_MF"), **kwargs)
    source = corpus_wer(params, config, corpus.split("eval_SF"), **kwargs)
    return target, source


def _evaluator(config: ModelConfig, spec: ExperimentSpec, corpus: Corpus) -> Evaluator:
    subset = corpus.split("eval_MF")[: spec.training.eval_utterances]

    def run(params: ModelParams) -> float:
        kwargs: dict[str, Any] = {"decode": spec.decode, "beam_size": spec.beam_size}
        return corpus_wer(params, config, subset, **kwargs).wer

    return run


# --- Recipe stages ---


@dataclass
class StageResult:
    """Trained parameters of one stage with the config needed to reuse them."""

    params: ModelParams
    config: ModelConfig
    train: TrainResult


@dataclass
class RecipeOutcome:
    report: RunReport
    params: ModelParams
    config: ModelConfig
    extras: dict[str, Any] = field(default_factory=dict)


def _train_stage(
    spec: ExperimentSpec,
    corpus: Corpus,
    config: ModelConfig,
    params: ModelParams,
    pool: Sequence[Utterance],
    loss_fn: UtteranceLoss,
    *,
    steps: int,
    stream: int,
    label: str,
    track_wer: bool = True,
) -> StageResult:
    result = train_loop(
        params,
        pool,
        loss_fn,
        steps=steps,
        optimizer=spec.optimizer,
        batch_size=spec.training.batch_size,
        seed=spec.seed,
        stream=stream,
        label=f"{spec.name}/{label}",
        log_every=spec.training.log_every,
        evaluate=_evaluator(config, spec, corpus) if track_wer else None,
        eval_every=spec.training.eval_every,
    )
    return StageResult(params, config, result)


def _report(
    spec: ExperimentSpec,
    corpus: Corpus,
    stage: StageResult,
    *,
    diverged: bool = False,
    pretrain_steps: int = 0,
    filter_stats: FilterStats | None = None,
    teacher_wer_target: float | None = None,
    scale_factors: dict[str, float] | None = None,
    skipped_updates: int = 0,
) -> RunReport:
    target, source = evaluate(stage.params, stage.config, spec, corpus)
    curve = stage.train.wer_curve
    reached = steps_to_threshold(curve, spec.wer_threshold)
    diverged = diverged or stage.train.diverged
    return RunReport(
        name=spec.name,
        algorithm=spec.algorithm,
        data_split=spec.data_split,
        label_fraction=spec.label_fraction,
        selfsup_kind=spec.selfsup.kind if uses_selfsup(spec) else None,
        seed=spec.seed,
        status=RunStatus.DIVERGED if diverged else RunStatus.COMPLETED,
        losses=stage.train.losses,
        wer_target=target.wer,
        wer_source=source.wer,
        target=target,
        source=source,
        wer_curve=curve,
        wer_threshold=spec.wer_threshold,
        steps_to_threshold=None if reached is None else pretrain_steps + reached,
        pretrain_steps=pretrain_steps,
        train_steps=stage.train.steps_run,
        total_steps=pretrain_steps + stage.train.steps_run,
        filter_stats=filter_stats,
        teacher_wer_target=teacher_wer_target,
        skipped_updates=skipped_updates + stage.train.skipped_updates,
        scale_factors=scale_factors or {},
        config=spec.model_dump(mode="json", by_alias=True),
    )


def _student(
    spec: ExperimentSpec, corpus: Corpus, *, with_selfsup: bool = False
) -> tuple[ModelConfig, ModelParams]:
    config = model_config(spec, corpus, spec.student, with_selfsup=with_selfsup)
    return config, build_model_params(config, spec.seed)


def train_supervised(
    spec: ExperimentSpec,
    corpus: Corpus,
    *,
    init: ModelParams | None = None,
    pretrain_steps: int = 0,
    scale_factors: dict[str, float] | None = None,
) -> RecipeOutcome:
    """RNN-T training on the labeled split only (optionally from pre-trained weights)."""
    validate_experiment(spec)
    config, params = _student(spec, corpus)
    if init is not None:
        copied = params.load_matching(init, prefix=f"{ENCODER_PREFIX}.")
        logger.info("%s: initialised %d encoder tensors from pre-training", spec.name, len(copied))
    stage = _train_stage(
        spec,
        corpus,
        config,
        params,
        labeled_pool(spec, corpus),
        supervised_loss(config),
        steps=spec.training.steps,
        stream=MAIN_STREAM,
        label="supervised",
    )
    report = _report(
        spec, corpus, stage, pretrain_steps=pretrain_steps, scale_factors=scale_factors
    )
    return RecipeOutcome(report, params, config)


def pretrain_selfsup(spec: ExperimentSpec, corpus: Corpus) -> StageResult:
    """Train encoder and self-sup head on MD features; transcripts are never read.

    Two-stage wav2vec2 uses ``spec.pretrain_encoder`` (right context); fine-tuning
    copies every shape-matching tensor into the causal student.
    """
    validate_experiment(spec)
    encoder = spec.pretrain_encoder or spec.student
    config = model_config(spec, corpus, encoder, with_selfsup=True)
    params = build_model_params(config, spec.seed, transducer=False)
    pool = corpus.split("MD")
    return _train_stage(
        spec,
        corpus,
        config,
        params,
        pool,
        selfsup_only_loss(config),
        steps=spec.training.pretrain_steps,
        stream=PRETRAIN_STREAM,
        label="pretrain",
        track_wer=False,
    )


def train_joint(
    spec: ExperimentSpec, corpus: Corpus, *, scale_factors: dict[str, float] | None = None
) -> RecipeOutcome:
    """Single-stage RNN-T + lambda * self-sup on the causal student."""
    validate_experiment(spec)
    config, params = _student(spec, corpus, with_selfsup=True)
    stage = _train_stage(
        spec,
        corpus,
        config,
        params,
        labeled_pool(spec, corpus),
        joint_training_loss(config),
        steps=spec.training.steps,
        stream=MAIN_STREAM,
        label="joint",
    )
    return RecipeOutcome(_report(spec, corpus, stage, scale_factors=scale_factors), params, config)


def train_teacher(spec: ExperimentSpec, corpus: Corpus) -> StageResult:
    """Fresh non-causal teacher with the confidence module, on the labeled split."""
    validate_experiment(spec)
    config = model_config(spec, corpus, spec.teacher, with_cem=True)
    params = build_model_params(config, spec.seed)
    return _train_stage(
        spec,
        corpus,
        config,
        params,
        labeled_pool(spec, corpus),
        teacher_loss(config),
        steps=spec.training.teacher_steps,
        stream=TEACHER_STREAM,
        label="teacher",
        track_wer=False,
    )


def pseudo_label(
    params: ModelParams,
    config: ModelConfig,
    utterances: Sequence[Utterance],
    *,
    threshold: float,
    beam_size: int = 4,
    source: PseudoLabelSource = PseudoLabelSource.TEACHER,
) -> FilterResult:
    """Decode clean inputs with the teacher, score with the CEM and filter.

    With ``source=ground_truth`` the held transcripts replace the hypotheses
    (every record scores 1.0). Raises EmptySelectionError when nothing is kept.
    """
    records = []
    for utt in utterances:
        if source == PseudoLabelSource.GROUND_TRUTH:
            tokens = list(utt.tokens)
            confidences = [1.0] * len(tokens)
            score = 1.0
        else:
            with T.no_grad():
                enc = encode(params, utt.features, config.encoder).encodings.data
            scorer = TransducerScorer(params, config, enc)
            best = beam_decode(
                scorer,
                beam_size,
                config.joint.max_symbols_per_frame,
                collect_confidence_inputs=True,
            )[0]
            scored = score_hypothesis(params, enc, best.emissions)
            tokens = list(best.tokens)
            confidences = [float(p) for p in scored.token_confidence]
            score = scored.utterance_score
        records.append(
            PseudoLabelRecord(
                utt_id=utt.utt_id,
                tokens=tokens,
                utterance_score=score,
                token_confidence=confidences,
                kept=False,
            )
        )
    result = filter_utterances(records, threshold)
    references = {u.utt_id: u.tokens for u in utterances}
    result.stats.all_label_wer = pseudo_label_wer(result.records, references)
    result.stats.kept_label_wer = pseudo_label_wer(result.kept, references)
    if not result.kept:
        msg = (
            f"confidence filter at {threshold} kept none of {len(records)} utterances; "
            "lower the confidence threshold"
        )
        raise EmptySelectionError(msg)
    return result


def nst_pool(
    labeled: Sequence[Utterance], corpus: Corpus, records: Sequence[PseudoLabelRecord]
) -> tuple[list[Utterance], dict[str, list[str]]]:
    """Labeled utterances plus kept pseudo-labeled ones, and the membership audit."""
    kept = [r for r in records if r.kept]
    dropped = {r.utt_id for r in records if not r.kept}
    pseudo = [
        corpus.utterances[r.utt_id].relabeled(r.tokens, LabelKind.PSEUDO, r.utterance_score)
        for r in kept
    ]
    pool = list(labeled) + pseudo
    pooled = [u.utt_id for u in pool if u.label_kind == LabelKind.PSEUDO]
    _check_no_dropped(pooled, dropped, "NST pool")
    audit = {
        "kept": [r.utt_id for r in kept],
        "dropped": sorted(dropped),
        "pooled_pseudo": pooled,
        "labeled": [u.utt_id for u in labeled],
    }
    return pool, audit


def _check_no_dropped(ids: Iterable[str], dropped: set[str], where: str) -> None:
    leaked = sorted(dropped.intersection(ids))
    if leaked:
        msg = f"{where} contains dropped pseudo-labels: {leaked[:5]}"
        raise ContractError(msg)


def recording(loss: UtteranceLoss, seen: set[str]) -> UtteranceLoss:
    """Wrap a loss so every pseudo-labeled utterance it trains on lands in ``seen``."""

    def loss_fn(
        params: ModelParams, utt: Utterance, rng: np.random.Generator, step: int
    ) -> Tensor | None:
        if utt.label_kind == LabelKind.PSEUDO:
            seen.add(utt.utt_id)
        return loss(params, utt, rng, step)

    return loss_fn


def write_audit(audit: dict[str, list[str]], out_dir: Path) -> Path:
    path = out_dir / AUDIT_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(audit, indent=2))
    return path


def train_student_nst(
    spec: ExperimentSpec,
    corpus: Corpus,
    records: Sequence[PseudoLabelRecord],
    *,
    init: ModelParams | None = None,
    pretrain_steps: int = 0,
    filter_stats: FilterStats | None = None,
    teacher_wer_target: float | None = None,
    out_dir: Path | None = None,
    scale_factors: dict[str, float] | None = None,
) -> RecipeOutcome:
    """Causal student on labeled and kept pseudo-labeled data with augmented inputs.

    Joint + NST trains with the joint objective; Self + Semi starts from ``init``.
    """
    validate_experiment(spec)
    joint = spec.algorithm == Algorithm.JOINT_PLUS_NST
    config, params = _student(spec, corpus, with_selfsup=joint)
    if init is not None:
        copied = params.load_matching(init, prefix=f"{ENCODER_PREFIX}.")
        logger.info("%s: student starts from %d pre-trained tensors", spec.name, len(copied))
    pool, audit = nst_pool(labeled_pool(spec, corpus), corpus, records)
    base = joint_training_loss(config) if joint else supervised_loss(config)
    drawn: set[str] = set()
    stage = _train_stage(
        spec,
        corpus,
        config,
        params,
        pool,
        recording(augmented(base, spec.augment, config.acoustic_dim), drawn),
        steps=spec.training.steps,
        stream=MAIN_STREAM,
        label="student",
    )
    _check_no_dropped(drawn, set(audit["dropped"]), "student batches")
    audit["trained_pseudo"] = sorted(drawn)
    if out_dir is not None:
        write_audit(audit, out_dir)
    report = _report(
        spec,
        corpus,
        stage,
        pretrain_steps=pretrain_steps,
        filter_stats=filter_stats,
        teacher_wer_target=teacher_wer_target,
        scale_factors=scale_factors,
    )
    return RecipeOutcome(report, params, config, {"audit": audit})


# --- Whole recipes ---


def _diverged_report(
    spec: ExperimentSpec,
    corpus: Corpus,
    stage: StageResult,
    scale_factors: dict[str, float] | None,
) -> RecipeOutcome:
    """Report for a run whose earlier stage diverged: the untrained student is evaluated."""
    config, params = _student(spec, corpus)
    aborted = StageResult(params, config, TrainResult(params, diverged=True))
    report = _report(
        spec,
        corpus,
        aborted,
        pretrain_steps=stage.train.steps_run,
        scale_factors=scale_factors,
        skipped_updates=stage.train.skipped_updates,
    )
    report.losses = stage.train.losses
    return RecipeOutcome(report, params, config)


def run_recipe(
    spec: ExperimentSpec,
    corpus: Corpus,
    *,
    out_dir: Path | None = None,
    scale_factors: dict[str, float] | None = None,
) -> RecipeOutcome:
    """Run every stage ``spec.algorithm`` needs and return the final report."""
    validate_experiment(spec)
    logger.info("Running %s (%s on %s)", spec.name, spec.algorithm.value, spec.data_split.value)
    algorithm = spec.algorithm
    if algorithm == Algorithm.SUPERVISED:
        return train_supervised(spec, corpus, scale_factors=scale_factors)
    if algorithm == Algorithm.JOINT_SELFSUP:
        return train_joint(spec, corpus, scale_factors=scale_factors)

    init: ModelParams | None = None
    pre_steps = 0
    if algorithm in _PRETRAIN_ALGORITHMS:
        pre = pretrain_selfsup(spec, corpus)
        if pre.train.diverged:
            return _diverged_report(spec, corpus, pre, scale_factors)
        if out_dir is not None:
            save_model(
                pre.params,
                pre.config,
                out_dir / "pretrain.npz",
                stage="pretrain",
                steps=pre.train.steps_run,
            )
        init, pre_steps = pre.params, pre.train.steps_run
    if algorithm == Algorithm.SELFSUP_PRETRAIN_FINETUNE:
        return train_supervised(
            spec, corpus, init=init, pretrain_steps=pre_steps, scale_factors=scale_factors
        )

    teacher = train_teacher(spec, corpus)
    if teacher.train.diverged:
        return _diverged_report(spec, corpus, teacher, scale_factors)
    if out_dir is not None:
        save_model(teacher.params, teacher.config, out_dir / "teacher.npz", stage="teacher")
    teacher_target, _ = evaluate(teacher.params, teacher.config, spec, corpus)
    selection = pseudo_label(
        teacher.params,
        teacher.config,
        unlabeled_pool(spec, corpus),
        threshold=spec.confidence_threshold,
        beam_size=spec.beam_size,
        source=spec.pseudo_label_source,
    )
    if out_dir is not None:
        write_manifest(selection.records, out_dir / "pseudo_labels.jsonl")
    return train_student_nst(
        spec,
        corpus,
        selection.records,
        init=init,
        pretrain_steps=pre_steps,
        filter_stats=selection.stats,
        teacher_wer_target=teacher_target.wer,
        out_dir=out_dir,
        scale_factors=scale_factors,
    )
