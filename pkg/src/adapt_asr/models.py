"""Data models for corpora, model configurations, experiments and reports."""

from __future__ import annotations

from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field

# --- Enums ---


class LabelKind(StrEnum):
    HUMAN = "human"
    PSEUDO = "pseudo"
    NONE = "none"


class SelfSupKind(StrEnum):
    WAV2VEC = "wav2vec"
    WAV2VEC2 = "wav2vec2"
    APC = "apc"


class Algorithm(StrEnum):
    SUPERVISED = "supervised"
    SELFSUP_PRETRAIN_FINETUNE = "selfsup_pretrain_finetune"
    JOINT_SELFSUP = "joint_selfsup"
    SEMISUP_NST = "semisup_nst"
    SELF_PLUS_SEMI = "self_plus_semi"
    JOINT_PLUS_NST = "joint_plus_nst"


class DataSplit(StrEnum):
    MD = "MD"
    MD_SRC = "MD_src"
    MD_3P = "MD_3p"
    SWEEP = "sweep"


class DecodeMode(StrEnum):
    GREEDY = "greedy"
    BEAM = "beam"


class PseudoLabelSource(StrEnum):
    TEACHER = "teacher"
    GROUND_TRUTH = "ground_truth"


class RunStatus(StrEnum):
    COMPLETED = "completed"
    DIVERGED = "diverged"


SOURCE_DOMAIN_ID = 0
TARGET_DOMAIN_ID = 1


# --- Corpus Models ---


class CorpusSpec(BaseModel):
    """Synthetic corpus recipe: source (short, command-like) vs target (long) domains."""

    vocab_size: int = Field(default=32, ge=1)
    feat_dim: int = Field(default=16, ge=1)
    source_len_range: tuple[int, int] = (20, 40)
    target_len_range: tuple[int, int] = (60, 120)
    domain_token_priors: tuple[list[float], list[float]] | None = None
    prior_skew: float = Field(default=1.5, gt=0.0)
    noise_sigma: float = Field(default=0.3, ge=0.0)
    jitter_sigma: float = Field(default=0.1, ge=0.0)
    token_frames: tuple[int, int] = (3, 6)
    n_source: int = Field(default=400, ge=0)
    n_target: int = Field(default=400, ge=0)
    n_eval_source: int = Field(default=40, ge=0)
    n_eval_target: int = Field(default=40, ge=0)
    target_label_fraction: float = Field(default=0.03, ge=0.0, le=1.0)
    n_domains: int = Field(default=4, ge=2)
    stack: int = Field(default=4, ge=1)
    subsample: int = Field(default=3, ge=1)
    min_tv_distance: float = 0.3
    min_probe_accuracy: float = 0.9
    seed: int = 0

    @property
    def acoustic_dim(self) -> int:
        return self.stack * self.feat_dim

    @property
    def input_dim(self) -> int:
        return self.acoustic_dim + self.n_domains


class SplitManifest(BaseModel):
    """Utterance-id lists for every training and evaluation split."""

    model_config = ConfigDict(populate_by_name=True)

    md: list[str] = Field(default_factory=list, alias="MD")
    md_src: list[str] = Field(default_factory=list, alias="MD_src")
    md_3p: list[str] = Field(default_factory=list, alias="MD_3p")
    mf: list[str] = Field(default_factory=list, alias="MF")
    mf_labeled: list[str] = Field(default_factory=list, alias="MF_labeled")
    mf_unlabeled: list[str] = Field(default_factory=list, alias="MF_unlabeled")
    eval_mf: list[str] = Field(default_factory=list, alias="eval_MF")
    eval_sf: list[str] = Field(default_factory=list, alias="eval_SF")

    def get_split(self, name: str) -> list[str]:
        for field_name, info in type(self).model_fields.items():
            if name in (field_name, info.alias):
                ids: list[str] = getattr(self, field_name)
                return ids
        msg = f"Unknown split '{name}'"
        raise KeyError(msg)


# --- Model Configuration ---


class EncoderConfig(BaseModel):
    """Conformer encoder geometry (desk defaults; full sizes in config/model.yaml)."""

    n_blocks: int = Field(default=4, ge=1)
    model_dim: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    left_context: int = Field(default=16, ge=0)
    right_context: int = Field(default=0, ge=0)
    conv_kernel: int = Field(default=7, ge=1)
    causal_conv: bool = True
    ff_expansion: int = Field(default=4, ge=1)

    @property
    def is_causal(self) -> bool:
        return self.right_context == 0 and self.causal_conv

    @property
    def conv_right_reach(self) -> int:
        return 0 if self.causal_conv else (self.conv_kernel - 1) // 2

    @property
    def lookahead_frames(self) -> int:
        """Future frames any output row may depend on, summed over all blocks."""
        return self.n_blocks * (self.right_context + self.conv_right_reach)


class PredictionNetConfig(BaseModel):
    n_layers: int = Field(default=1, ge=1)
    embed_dim: int = Field(default=32, ge=1)
    hidden: int = Field(default=64, ge=1)
    proj: int = Field(default=32, ge=1)


class JointConfig(BaseModel):
    joint_dim: int = Field(default=32, ge=1)
    max_symbols_per_frame: int = Field(default=4, ge=1)


class SelfSupConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    kind: SelfSupKind = SelfSupKind.WAV2VEC
    lambda_: float = Field(default=0.5, alias="lambda")
    future_steps: int = Field(default=3, ge=1)
    n_negatives: int = Field(default=8, ge=1)
    mask_prob: float = 0.2
    mask_span: int = Field(default=4, ge=1)
    apc_shift: int = Field(default=3, ge=1)
    apc_tv_weight: float = Field(default=0.1, ge=0.0)
    head_hidden: int = Field(default=64, ge=1)


class CemConfig(BaseModel):
    hidden: int = Field(default=32, ge=1)
    weight: float = Field(default=1.0, ge=0.0)
    train_beam_size: int = Field(default=2, ge=1)
    start_step: int = Field(default=0, ge=0)


class ModelConfig(BaseModel):
    """Everything needed to rebuild a model's parameter tree from a checkpoint."""

    input_dim: int = Field(ge=1)
    vocab_size: int = Field(ge=1)
    n_domains: int = Field(default=4, ge=0)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    predictor: PredictionNetConfig = Field(default_factory=PredictionNetConfig)
    joint: JointConfig = Field(default_factory=JointConfig)
    selfsup: SelfSupConfig | None = None
    cem: CemConfig | None = None

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    @property
    def acoustic_dim(self) -> int:
        """Leading feature columns that hold stacked acoustics (the rest is the domain one-hot)."""
        return self.input_dim - self.n_domains


# --- Training and Experiment Configuration ---


class OptimizerConfig(BaseModel):
    lr: float = Field(default=2e-3, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float | None = 5.0


class AugmentConfig(BaseModel):
    """Noisy-student input augmentation: time masks plus feature noise."""

    n_time_masks: int = Field(default=2, ge=0)
    max_mask_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    noise_sigma: float = Field(default=0.1, ge=0.0)


class TrainingConfig(BaseModel):
    steps: int = Field(default=600, ge=0)
    pretrain_steps: int = Field(default=400, ge=0)
    teacher_steps: int = Field(default=600, ge=0)
    batch_size: int = Field(default=8, ge=1)
    eval_every: int = Field(default=100, ge=1)
    eval_utterances: int = Field(default=40, ge=1)
    log_every: int = Field(default=50, ge=1)
    max_steps: int = 5000


class ModelDefaults(BaseModel):
    """Resolved contents of config/model.yaml."""

    student: EncoderConfig
    teacher: EncoderConfig
    pretrain_right_context: int = 8
    predictor: PredictionNetConfig
    joint: JointConfig
    selfsup: SelfSupConfig
    cem: CemConfig
    n_domains: int = 4
    scale_factors: dict[str, float] = Field(default_factory=dict)
    full_size: bool = False


class TrainingDefaults(BaseModel):
    """Resolved contents of config/training.yaml."""

    optimizer: OptimizerConfig
    training: TrainingConfig
    augment: AugmentConfig
    confidence_threshold: float = 0.9
    beam_size: int = 4
    decode: DecodeMode = DecodeMode.GREEDY


class ExperimentSpec(BaseModel):
    """Declarative description of one run in the ablation grid."""

    name: str
    algorithm: Algorithm = Algorithm.SUPERVISED
    data_split: DataSplit = DataSplit.MD_SRC
    label_fraction: float | None = None
    selfsup: SelfSupConfig = Field(default_factory=SelfSupConfig)
    confidence_threshold: float = 0.9
    beam_size: int = Field(default=4, ge=1)
    pseudo_label_source: PseudoLabelSource = PseudoLabelSource.TEACHER
    student: EncoderConfig = Field(default_factory=EncoderConfig)
    teacher: EncoderConfig = Field(
        default_factory=lambda: EncoderConfig(right_context=8, causal_conv=False)
    )
    pretrain_encoder: EncoderConfig | None = None
    predictor: PredictionNetConfig = Field(default_factory=PredictionNetConfig)
    joint: JointConfig = Field(default_factory=JointConfig)
    cem: CemConfig = Field(default_factory=CemConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    decode: DecodeMode = DecodeMode.GREEDY
    wer_threshold: float | None = None
    seed: int = 0


# --- Scoring and Reports ---


class WerBreakdown(BaseModel):
    """Edit-distance error counts and the resulting word error rate."""

    substitutions: int = Field(default=0, ge=0)
    insertions: int = Field(default=0, ge=0)
    deletions: int = Field(default=0, ge=0)
    n_ref_tokens: int = Field(default=0, ge=0)
    wer: float = 0.0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


class FilterStats(BaseModel):
    threshold: float
    n_total: int = Field(ge=0)
    n_kept: int = Field(ge=0)
    n_dropped: int = Field(ge=0)
    dropped_fraction: float = 0.0
    kept_label_wer: float | None = None
    all_label_wer: float | None = None


class PseudoLabelRecord(BaseModel):
    """One line of the pseudo-label manifest (JSON lines)."""

    utt_id: str
    tokens: list[int]
    utterance_score: float
    token_confidence: list[float] = Field(default_factory=list)
    kept: bool


class WerPoint(BaseModel):
    step: int
    wer_target: float


class RunReport(BaseModel):
    """Metrics of one recipe run; reproducible from (spec, corpus, seed)."""

    name: str
    algorithm: Algorithm
    data_split: DataSplit
    label_fraction: float | None = None
    selfsup_kind: SelfSupKind | None = None
    seed: int
    status: RunStatus = RunStatus.COMPLETED
    losses: list[float] = Field(default_factory=list)
    wer_target: float
    wer_source: float
    target: WerBreakdown
    source: WerBreakdown
    wer_curve: list[WerPoint] = Field(default_factory=list)
    wer_threshold: float | None = None
    steps_to_threshold: int | None = None
    pretrain_steps: int = 0
    train_steps: int = 0
    total_steps: int = 0
    filter_stats: FilterStats | None = None
    teacher_wer_target: float | None = None
    skipped_updates: int = 0
    scale_factors: dict[str, float] = Field(default_factory=dict)
    config: dict[str, object] = Field(default_factory=dict)


# --- Presets ---


class PresetRow(BaseModel):
    """One row of an ablation table; unset fields fall back to experiment defaults."""

    name: str
    algorithm: Algorithm
    data_split: DataSplit = DataSplit.MD_SRC
    label_fraction: float | None = None
    selfsup_kind: SelfSupKind | None = None
    selfsup_lambda: float | None = None
    confidence_threshold: float | None = None
    pretrain_right_context: int | None = None
    pseudo_label_source: PseudoLabelSource | None = None
    threshold_from: str | None = None


class Preset(BaseModel):
    name: str
    description: str
    rows: list[PresetRow]
