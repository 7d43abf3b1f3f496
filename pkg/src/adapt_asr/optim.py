"""Named parameter trees, the Adam optimizer and the checkpoint file format."""

from __future__ import annotations

import json
import logging
import zipfile
import zlib
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from adapt_asr.errors import ContractError, CorpusFormatError, DependencyError
from adapt_asr.tensor import Array, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "__meta__"


def component_rng(seed: int, path: str) -> np.random.Generator:
    """Generator for initialising one component, independent of every other path."""
    return np.random.default_rng([seed, zlib.crc32(path.encode("utf-8"))])


# --- Parameter tree ---


class ModelParams:
    """Ordered mapping from dotted parameter path to a trainable leaf tensor."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None) -> None:
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._tensors[path]
        except KeyError:
            msg = f"Unknown parameter '{path}'"
            raise KeyError(msg) from None

    def __contains__(self, path: object) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def add(self, path: str, data: ArrayLike) -> Tensor:
        if path in self._tensors:
            msg = f"Parameter '{path}' already exists"
            raise ContractError(msg)
        tensor = Tensor(data, requires_grad=True)
        self._tensors[path] = tensor
        return tensor

    def update(self, other: ModelParams) -> None:
        for path, tensor in other.items():
            if path in self._tensors:
                msg = f"Parameter '{path}' already exists"
                raise ContractError(msg)
            self._tensors[path] = tensor

    def subtree(self, prefix: str) -> ModelParams:
        """View of every parameter under ``prefix`` (tensors are shared, not copied)."""
        stem = prefix.rstrip(".") + "."
        return ModelParams({p: t for p, t in self._tensors.items() if p.startswith(stem)})

    def without(self, prefix: str) -> ModelParams:
        stem = prefix.rstrip(".") + "."
        return ModelParams({p: t for p, t in self._tensors.items() if not p.startswith(stem)})

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def copy(self) -> ModelParams:
        return ModelParams(
            {p: Tensor(t.data.copy(), requires_grad=True) for p, t in self._tensors.items()}
        )

    def load_matching(self, other: ModelParams, prefix: str = "") -> list[str]:
        """Copy values from ``other`` wherever path (under ``prefix``) and shape agree.

        Returns the copied paths, in this tree's order.
        """
        copied: list[str] = []
        for path, tensor in self._tensors.items():
            if not path.startswith(prefix) or path not in other:
                continue
            source = other[path]
            if source.shape == tensor.shape:
                tensor.data = source.data.copy()
                copied.append(path)
        skipped = [p for p in other if p.startswith(prefix) and p not in copied]
        if skipped:
            logger.debug("load_matching left %d parameters untouched", len(skipped))
        return copied

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())


# --- Adam ---


@dataclass
class AdamState:
    """First/second moment buffers per parameter path plus counters."""

    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    step: int = 0
    skipped_updates: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> AdamState:
        return cls(
            m={p: np.zeros_like(t.data) for p, t in params.items()},
            v={p: np.zeros_like(t.data) for p, t in params.items()},
        )


def adam_step(
    params: ModelParams,
    state: AdamState,
    *,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> None:
    """Apply one Adam update in place from the ``grad`` buffers of ``params``.

    A parameter whose gradient is non-finite is left untouched (moments included)
    and counted in ``state.skipped_updates``. Missing gradients count as zero.
    """
    grads: dict[str, Array] = {}
    for path, tensor in params.items():
        if path not in state.m or state.m[path].shape != tensor.shape:
            msg = f"adam_step: moment buffer for '{path}' does not match {tensor.shape}"
            raise ContractError(msg)
        grads[path] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)

    bad = [p for p, g in grads.items() if not np.isfinite(g).all()]
    for path in bad:
        logger.warning("Skipping update of '%s': non-finite gradient", path)
        state.skipped_updates += 1

    if clip_norm is not None:
        total = float(np.sqrt(sum(float((g * g).sum()) for p, g in grads.items() if p not in bad)))
        if total > clip_norm:
            factor = clip_norm / total
            grads = {p: g * factor if p not in bad else g for p, g in grads.items()}

    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for path, tensor in params.items():
        if path in bad:
            continue
        g = grads[path]
        state.m[path] = beta1 * state.m[path] + (1.0 - beta1) * g
        state.v[path] = beta2 * state.v[path] + (1.0 - beta2) * g * g
        m_hat = state.m[path] / correction1
        v_hat = state.v[path] / correction2
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# --- Checkpoints ---


def save_checkpoint(params: ModelParams, path: Path, metadata: Mapping[str, Any]) -> Path:
    """Write parameters as little-endian float64 arrays plus a JSON metadata record."""
    if _META_KEY in params:
        msg = f"Parameter path '{_META_KEY}' is reserved"
        raise ContractError(msg)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, **metadata}
    arrays: dict[str, Any] = {p: t.data.astype("<f8") for p, t in params.items()}
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path: Path) -> tuple[ModelParams, dict[str, Any]]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    if not path.exists():
        msg = f"Checkpoint not found at {path}"
        raise DependencyError(msg)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        msg = f"{path}: unreadable checkpoint ({e})"
        raise CorpusFormatError(msg) from e
    if _META_KEY not in arrays:
        msg = f"{path}: missing checkpoint metadata"
        raise CorpusFormatError(msg)
    meta: dict[str, Any] = json.loads(str(arrays.pop(_META_KEY)))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        msg = (
            f"{path}: checkpoint format version {meta.get('format_version')} "
            f"!= {CHECKPOINT_FORMAT_VERSION}"
        )
        raise CorpusFormatError(msg)
    params = ModelParams({name: Tensor(a, requires_grad=True) for name, a in arrays.items()})
    return params, meta
