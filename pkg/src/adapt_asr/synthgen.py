"""Synthetic two-domain corpus: prototype-frame utterances, splits and the binary corpus file.

Each token owns a fixed run of 3-6 jittered prototype frames. An utterance is the
concatenation of its tokens' prototype runs plus Gaussian noise, stacked and
subsampled like log-mel input, with the domain one-hot appended. The source domain
is short with one token prior; the target domain is long with a shifted prior.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from adapt_asr.errors import ConfigError, ContractError, CorpusFormatError, DependencyError
from adapt_asr.models import (
    SOURCE_DOMAIN_ID,
    TARGET_DOMAIN_ID,
    CorpusSpec,
    LabelKind,
    SplitManifest,
)
from adapt_asr.tensor import Array

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"ADSR"
CORPUS_FORMAT_VERSION = 1
CORPUS_FILENAME = "corpus.adsr"
MANIFEST_FILENAME = "manifest.json"
SPEC_FILENAME = "corpus_spec.json"

TV_SAMPLES = 10_000

_HEADER = struct.Struct("<4sIIII")
_LABEL_CODES = {LabelKind.HUMAN: 0, LabelKind.PSEUDO: 1, LabelKind.NONE: 2}
_LABEL_KINDS = {code: kind for kind, code in _LABEL_CODES.items()}


# --- Corpus types ---


@dataclass
class Utterance:
    """Stacked features ``[T', acoustic + D]`` with transcript and provenance.

    Tokens of ``LabelKind.NONE`` utterances are the held-out ground truth; recipes
    never train on them unless a ground-truth control run asks for it.
    """

    utt_id: str
    features: Array
    tokens: list[int]
    domain_id: int
    label_kind: LabelKind = LabelKind.HUMAN
    confidence: float | None = None
    n_domains: int = 4

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            msg = f"{self.utt_id}: features must be 2-D and non-empty, got {self.features.shape}"
            raise ContractError(msg)
        if not 0 <= self.domain_id < self.n_domains:
            msg = f"{self.utt_id}: domain id {self.domain_id} outside [0, {self.n_domains})"
            raise ContractError(msg)
        if (self.confidence is not None) != (self.label_kind == LabelKind.PSEUDO):
            msg = f"{self.utt_id}: confidence must be set exactly for pseudo labels"
            raise ContractError(msg)
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            msg = f"{self.utt_id}: confidence {self.confidence} outside [0, 1]"
            raise ContractError(msg)

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def domain_one_hot(self) -> Array:
        one_hot = np.zeros(self.n_domains)
        one_hot[self.domain_id] = 1.0
        return one_hot

    def relabeled(
        self, tokens: list[int], kind: LabelKind, confidence: float | None = None
    ) -> Utterance:
        return replace(self, tokens=list(tokens), label_kind=kind, confidence=confidence)


@dataclass
class Corpus:
    spec: CorpusSpec
    utterances: dict[str, Utterance]
    manifest: SplitManifest
    priors: tuple[Array, Array] | None = None
    stats: dict[str, float] = field(default_factory=dict)

    def get(self, ids: list[str]) -> list[Utterance]:
        missing = [i for i in ids if i not in self.utterances]
        if missing:
            msg = f"Unknown utterance ids: {missing[:5]}"
            raise ContractError(msg)
        return [self.utterances[i] for i in ids]

    def split(self, name: str) -> list[Utterance]:
        try:
            ids = self.manifest.get_split(name)
        except KeyError as e:
            msg = f"Unknown split '{name}'"
            raise ConfigError(msg) from e
        return self.get(ids)


# --- Generation ---


def validate_corpus_spec(spec: CorpusSpec) -> None:
    if spec.vocab_size < 4:
        msg = f"vocab_size must be >= 4, got {spec.vocab_size}"
        raise ConfigError(msg)
    for name, (lo, hi) in (
        ("source_len_range", spec.source_len_range),
        ("target_len_range", spec.target_len_range),
        ("token_frames", spec.token_frames),
    ):
        if lo < 1 or hi < lo:
            msg = f"{name} {lo}-{hi} is empty"
            raise ConfigError(msg)
    source_mean = sum(spec.source_len_range) / 2
    target_mean = sum(spec.target_len_range) / 2
    if target_mean < 2 * source_mean:
        msg = f"target mean length {target_mean} must be >= 2x source mean {source_mean}"
        raise ConfigError(msg)
    if spec.n_domains <= TARGET_DOMAIN_ID:
        msg = f"n_domains must be > {TARGET_DOMAIN_ID}, got {spec.n_domains}"
        raise ConfigError(msg)


def stack_frames(features: Array, stack: int = 4, subsample: int = 3) -> Array:
    """Row ``i`` concatenates input rows ``subsample*i .. subsample*i + stack - 1``.

    Rows past the end are zero. The output has ``ceil(T / subsample)`` rows.
    """
    if features.ndim != 2 or features.shape[0] < 1:
        msg = f"stack_frames: need [T, F] with T >= 1, got {features.shape}"
        raise ContractError(msg)
    n_frames, width = features.shape
    n_out = -(-n_frames // subsample)
    padded = np.zeros((n_out * subsample + stack, width))
    padded[:n_frames] = features
    out = np.empty((n_out, stack * width))
    for i in range(n_out):
        start = i * subsample
        out[i] = padded[start : start + stack].reshape(-1)
    return out


def token_priors(spec: CorpusSpec, rng: np.random.Generator) -> tuple[Array, Array]:
    """Source and target categorical priors; source favours the first half of the vocabulary."""
    if spec.domain_token_priors is not None:
        priors = []
        for raw in spec.domain_token_priors:
            p = np.asarray(raw, dtype=np.float64)
            if p.shape != (spec.vocab_size,) or (p < 0).any() or p.sum() <= 0:
                msg = f"domain_token_priors must be {spec.vocab_size} non-negative weights"
                raise ConfigError(msg)
            priors.append(p / p.sum())
        return priors[0], priors[1]
    half = np.arange(spec.vocab_size) < spec.vocab_size // 2
    base = rng.normal(0.0, 0.5, size=spec.vocab_size)
    source = np.exp(base + spec.prior_skew * half)
    target = np.exp(base + spec.prior_skew * ~half)
    return source / source.sum(), target / target.sum()


def measured_tv_distance(
    source: Array, target: Array, rng: np.random.Generator, n_samples: int = TV_SAMPLES
) -> float:
    """Total-variation distance between empirical histograms of the two priors."""
    size = source.shape[0]
    src = np.bincount(rng.choice(size, n_samples, p=source), minlength=size) / n_samples
    tgt = np.bincount(rng.choice(size, n_samples, p=target), minlength=size) / n_samples
    return float(0.5 * np.abs(src - tgt).sum())


def _prototypes(spec: CorpusSpec, rng: np.random.Generator) -> list[Array]:
    lo, hi = spec.token_frames
    protos = []
    for _ in range(spec.vocab_size):
        duration = int(rng.integers(lo, hi + 1))
        center = rng.normal(0.0, 1.0, size=spec.feat_dim)
        protos.append(center + spec.jitter_sigma * rng.normal(size=(duration, spec.feat_dim)))
    return protos


def _make_utterance(
    utt_id: str,
    spec: CorpusSpec,
    domain_id: int,
    prior: Array,
    protos: list[Array],
    rng: np.random.Generator,
) -> Utterance:
    lo, hi = spec.source_len_range if domain_id == SOURCE_DOMAIN_ID else spec.target_len_range
    goal = int(rng.integers(lo, hi + 1))
    tokens: list[int] = []
    n_raw = 0
    while n_raw < goal:
        token = int(rng.choice(spec.vocab_size, p=prior))
        tokens.append(token)
        n_raw += protos[token].shape[0]
    raw = np.concatenate([protos[t] for t in tokens], axis=0)
    if spec.noise_sigma > 0:
        raw = raw + spec.noise_sigma * rng.normal(size=raw.shape)
    stacked = stack_frames(raw, spec.stack, spec.subsample)
    one_hot = np.zeros((stacked.shape[0], spec.n_domains))
    one_hot[:, domain_id] = 1.0
    return Utterance(
        utt_id=utt_id,
        features=np.concatenate([stacked, one_hot], axis=1),
        tokens=tokens,
        domain_id=domain_id,
        n_domains=spec.n_domains,
    )


def probe_accuracy(utterances: list[Utterance], acoustic_dim: int) -> float:
    """Training accuracy of a least-squares linear domain probe on summary features."""
    rows = [
        np.concatenate([u.features[:, :acoustic_dim].mean(axis=0), [np.log(u.n_frames), 1.0]])
        for u in utterances
    ]
    x = np.stack(rows)
    y = np.array([1.0 if u.domain_id == TARGET_DOMAIN_ID else -1.0 for u in utterances])
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    return float(np.mean(np.sign(x @ w) == y))


def label_fraction_ids(manifest: SplitManifest, fraction: float) -> list[str]:
    """The first ``round(fraction * |MF|)`` ids of the seeded MF ordering (nested in fraction)."""
    if not 0.0 <= fraction <= 1.0:
        msg = f"label fraction {fraction} outside [0, 1]"
        raise ConfigError(msg)
    count = int(np.floor(fraction * len(manifest.mf) + 0.5))
    return manifest.mf[:count]


def label_fraction_split(manifest: SplitManifest, fraction: float) -> list[str]:
    """MD_src plus a nested seeded fraction of MF (0 gives MD_src, 1 gives MD)."""
    return manifest.md_src + label_fraction_ids(manifest, fraction)


def generate(spec: CorpusSpec) -> Corpus:
    """Build the corpus and its split manifest; a pure function of ``spec``."""
    validate_corpus_spec(spec)
    rng = np.random.default_rng([spec.seed, 0])
    source_prior, target_prior = token_priors(spec, rng)
    tv = measured_tv_distance(source_prior, target_prior, np.random.default_rng([spec.seed, 1]))
    if tv < spec.min_tv_distance:
        msg = f"domain priors too close: TV distance {tv:.3f} < {spec.min_tv_distance}"
        raise ConfigError(msg)
    protos = _prototypes(spec, np.random.default_rng([spec.seed, 2]))

    groups = (
        ("src", SOURCE_DOMAIN_ID, spec.n_source, source_prior, 10),
        ("tgt", TARGET_DOMAIN_ID, spec.n_target, target_prior, 11),
        ("evsrc", SOURCE_DOMAIN_ID, spec.n_eval_source, source_prior, 12),
        ("evtgt", TARGET_DOMAIN_ID, spec.n_eval_target, target_prior, 13),
    )
    utterances: dict[str, Utterance] = {}
    ids: dict[str, list[str]] = {}
    for stem, domain_id, count, prior, stream in groups:
        ids[stem] = []
        for i in range(count):
            utt_id = f"{stem}-{i:05d}"
            utt_rng = np.random.default_rng([spec.seed, stream, i])
            utterances[utt_id] = _make_utterance(utt_id, spec, domain_id, prior, protos, utt_rng)
            ids[stem].append(utt_id)

    order = np.random.default_rng([spec.seed, 3]).permutation(len(ids["tgt"]))
    mf = [ids["tgt"][i] for i in order]
    manifest = SplitManifest(md_src=ids["src"], mf=mf, eval_sf=ids["evsrc"], eval_mf=ids["evtgt"])
    labeled = label_fraction_ids(manifest, spec.target_label_fraction)
    manifest.mf_labeled = labeled
    manifest.mf_unlabeled = mf[len(labeled) :]
    manifest.md = ids["src"] + mf
    manifest.md_3p = ids["src"] + labeled
    for utt_id in manifest.mf_unlabeled:
        utterances[utt_id].label_kind = LabelKind.NONE

    stats = {"tv_distance": tv}
    if len(ids["src"]) and len(ids["tgt"]):
        probe_set = [utterances[i] for i in ids["src"] + ids["tgt"]]
        accuracy = probe_accuracy(probe_set, spec.acoustic_dim)
        if accuracy < spec.min_probe_accuracy:
            msg = f"domain probe accuracy {accuracy:.3f} < {spec.min_probe_accuracy}"
            raise ConfigError(msg)
        stats["probe_accuracy"] = accuracy
    logger.info(
        "Generated %d utterances (TV distance %.3f, probe accuracy %s)",
        len(utterances),
        tv,
        f"{stats['probe_accuracy']:.3f}" if "probe_accuracy" in stats else "n/a",
    )
    return Corpus(spec, utterances, manifest, (source_prior, target_prior), stats)


# --- Corpus file ---


def _encode_record(utt: Utterance) -> bytes:
    name = utt.utt_id.encode("utf-8")
    n_frames, width = utt.features.shape
    confidence = float("nan") if utt.confidence is None else utt.confidence
    parts = [
        struct.pack("<H", len(name)),
        name,
        struct.pack(
            "<BBdIII",
            utt.domain_id,
            _LABEL_CODES[utt.label_kind],
            confidence,
            n_frames,
            width,
            len(utt.tokens),
        ),
        struct.pack(f"<{len(utt.tokens)}H", *utt.tokens),
        utt.features.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def encode_corpus(utterances: list[Utterance], vocab_size: int, n_domains: int) -> bytes:
    header = _HEADER.pack(
        CORPUS_MAGIC, CORPUS_FORMAT_VERSION, len(utterances), vocab_size, n_domains
    )
    return header + b"".join(_encode_record(u) for u in utterances)


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            msg = f"{self.source}: truncated at byte {self.offset} (needed {size} more)"
            raise CorpusFormatError(msg)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple[int | float, ...]:
        values: tuple[int | float, ...] = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values


def decode_corpus(data: bytes, source: str = "<bytes>") -> tuple[list[Utterance], int, int]:
    """Parse a corpus blob; returns (utterances, vocab_size, n_domains)."""
    reader = _Reader(data, source)
    magic, version, count, vocab_size, n_domains = _HEADER.unpack(reader.take(_HEADER.size))
    if magic != CORPUS_MAGIC:
        msg = f"{source}: bad magic {magic!r}, expected {CORPUS_MAGIC!r}"
        raise CorpusFormatError(msg)
    if version != CORPUS_FORMAT_VERSION:
        msg = f"{source}: corpus format version {version} != {CORPUS_FORMAT_VERSION}"
        raise CorpusFormatError(msg)
    utterances = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        utt_id = reader.take(int(name_len)).decode("utf-8")
        domain_id, label_code, confidence, n_frames, width, n_tokens = reader.unpack("<BBdIII")
        tokens = [int(t) for t in reader.unpack(f"<{int(n_tokens)}H")]
        n_values = int(n_frames) * int(width)
        features = np.frombuffer(reader.take(8 * n_values), dtype="<f8").astype(np.float64)
        if int(label_code) not in _LABEL_KINDS:
            msg = f"{source}: record '{utt_id}' has unknown label kind {label_code}"
            raise CorpusFormatError(msg)
        if any(t >= vocab_size for t in tokens):
            msg = f"{source}: record '{utt_id}' has token ids >= vocab size {vocab_size}"
            raise CorpusFormatError(msg)
        try:
            utterances.append(
                Utterance(
                    utt_id=utt_id,
                    features=features.reshape(int(n_frames), int(width)),
                    tokens=tokens,
                    domain_id=int(domain_id),
                    label_kind=_LABEL_KINDS[int(label_code)],
                    confidence=None if np.isnan(confidence) else float(confidence),
                    n_domains=int(n_domains),
                )
            )
        except ContractError as e:
            msg = f"{source}: invalid record ({e})"
            raise CorpusFormatError(msg) from e
    if reader.offset != len(data):
        msg = f"{source}: {len(data) - reader.offset} trailing bytes after {count} records"
        raise CorpusFormatError(msg)
    return utterances, int(vocab_size), int(n_domains)


def write_corpus(corpus: Corpus, out_dir: Path) -> Path:
    """Write corpus.adsr, manifest.json and corpus_spec.json into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = encode_corpus(
        list(corpus.utterances.values()), corpus.spec.vocab_size, corpus.spec.n_domains
    )
    (out_dir / CORPUS_FILENAME).write_bytes(blob)
    manifest = corpus.manifest.model_dump(mode="json", by_alias=True)
    (out_dir / MANIFEST_FILENAME).write_text(json.dumps(manifest, indent=2))
    (out_dir / SPEC_FILENAME).write_text(json.dumps(corpus.spec.model_dump(mode="json"), indent=2))
    return out_dir


def read_corpus(corpus_dir: Path) -> Corpus:
    """Read a corpus directory written by :func:`write_corpus`."""
    corpus_path = corpus_dir / CORPUS_FILENAME
    if not corpus_path.exists():
        msg = f"No corpus at {corpus_path}; run gen-data first"
        raise DependencyError(msg)
    utterances, vocab_size, n_domains = decode_corpus(corpus_path.read_bytes(), str(corpus_path))
    try:
        manifest = SplitManifest.model_validate_json((corpus_dir / MANIFEST_FILENAME).read_text())
        spec = CorpusSpec.model_validate_json((corpus_dir / SPEC_FILENAME).read_text())
    except (OSError, ValueError) as e:
        msg = f"{corpus_dir}: unreadable manifest or spec ({e})"
        raise CorpusFormatError(msg) from e
    if spec.vocab_size != vocab_size or spec.n_domains != n_domains:
        msg = f"{corpus_dir}: corpus header disagrees with {SPEC_FILENAME}"
        raise CorpusFormatError(msg)
    by_id = {u.utt_id: u for u in utterances}
    known = set(by_id)
    for name in SplitManifest.model_fields:
        unknown = [i for i in getattr(manifest, name) if i not in known]
        if unknown:
            msg = f"{corpus_dir}: split '{name}' references unknown ids {unknown[:5]}"
            raise CorpusFormatError(msg)
    return Corpus(spec, by_id, manifest)
