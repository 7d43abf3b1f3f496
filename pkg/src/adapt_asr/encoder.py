"""Streaming conformer audio encoder.

Each block is the macaron sandwich: half-step feed-forward, banded multi-head
self-attention over ``[t - left_context, t + right_context]``, a GLU +
depthwise convolution module, a second half-step feed-forward and a final layer
norm, with residual connections around every module. With ``right_context == 0``
and a causal convolution, row ``t`` of the output depends on input rows ``<= t`` only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from adapt_asr import tensor as T
from adapt_asr.errors import ConfigError, ContractError
from adapt_asr.layers import add_linear, add_norm, linear, norm
from adapt_asr.models import EncoderConfig
from adapt_asr.optim import ModelParams, component_rng
from adapt_asr.tensor import Array, Tensor

ENCODER_PREFIX = "encoder"


@dataclass
class EncoderOutput:
    """Frame encodings ``[T', model_dim]`` plus optional per-block activations."""

    encodings: Tensor
    layers: list[Tensor] = field(default_factory=list)
    attention: list[Array] = field(default_factory=list)


def validate_encoder_config(config: EncoderConfig) -> None:
    if config.model_dim % config.n_heads:
        msg = f"model_dim {config.model_dim} not divisible by n_heads {config.n_heads}"
        raise ConfigError(msg)


def build_encoder_params(
    config: EncoderConfig, input_dim: int, seed: int, prefix: str = ENCODER_PREFIX
) -> ModelParams:
    validate_encoder_config(config)
    d = config.model_dim
    params = ModelParams()
    add_linear(params, f"{prefix}.input", input_dim, d, seed)
    for i in range(config.n_blocks):
        block = f"{prefix}.block{i}"
        for ff in ("ff1", "ff2"):
            add_norm(params, f"{block}.{ff}.norm", d)
            add_linear(params, f"{block}.{ff}.w1", d, config.ff_expansion * d, seed)
            add_linear(params, f"{block}.{ff}.w2", config.ff_expansion * d, d, seed)
        add_norm(params, f"{block}.mhsa.norm", d)
        for proj in ("q", "k", "v", "o"):
            add_linear(params, f"{block}.mhsa.{proj}", d, d, seed)
        add_norm(params, f"{block}.conv.norm", d)
        add_linear(params, f"{block}.conv.pw1", d, 2 * d, seed)
        rng = component_rng(seed, f"{block}.conv.depthwise")
        kernel = rng.normal(0.0, 1.0 / np.sqrt(config.conv_kernel), size=(config.conv_kernel, d))
        params.add(f"{block}.conv.depthwise", kernel)
        add_norm(params, f"{block}.conv.post_norm", d)
        add_linear(params, f"{block}.conv.pw2", d, d, seed)
        add_norm(params, f"{block}.final_norm", d)
    return params


def attention_mask(n_frames: int, left_context: int, right_context: int) -> NDArray[np.bool_]:
    """``mask[t, j]`` is True iff ``t - left_context <= j <= t + right_context``."""
    offset = np.arange(n_frames)[None, :] - np.arange(n_frames)[:, None]
    return (offset >= -left_context) & (offset <= right_context)


# --- Block modules ---


def feed_forward(params: ModelParams, path: str, x: Tensor) -> Tensor:
    h = norm(params, f"{path}.norm", x)
    h = T.swish(linear(params, f"{path}.w1", h))
    return linear(params, f"{path}.w2", h)


def self_attention(
    params: ModelParams,
    path: str,
    x: Tensor,
    config: EncoderConfig,
    weights_out: list[Array] | None = None,
) -> Tensor:
    """Multi-head attention restricted to the ``[t-left, t+right]`` band (no layer norm)."""
    n_frames, d = x.shape
    heads = config.n_heads
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (n_frames, heads, dh)), (1, 0, 2))

    q = split(linear(params, f"{path}.q", x))
    k = T.transpose(T.reshape(linear(params, f"{path}.k", x), (n_frames, heads, dh)), (1, 2, 0))
    v = split(linear(params, f"{path}.v", x))
    scores = T.scale(T.matmul(q, k), 1.0 / np.sqrt(dh))
    mask = attention_mask(n_frames, config.left_context, config.right_context)
    weights = T.softmax_lastdim(scores, mask)
    if weights_out is not None:
        weights_out.append(weights.data)
    context = T.transpose(T.matmul(weights, v), (1, 0, 2))
    return linear(params, f"{path}.o", T.reshape(context, (n_frames, d)))


def conv_module(params: ModelParams, path: str, x: Tensor, config: EncoderConfig) -> Tensor:
    d = x.shape[1]
    h = linear(params, f"{path}.pw1", norm(params, f"{path}.norm", x))
    h = T.mul(T.slice_along(h, 1, 0, d), T.sigmoid(T.slice_along(h, 1, d, 2 * d)))
    h = T.conv1d_depthwise(h, params[f"{path}.depthwise"], causal=config.causal_conv)
    h = T.swish(norm(params, f"{path}.post_norm", h))
    return linear(params, f"{path}.pw2", h)


def conformer_block(
    params: ModelParams,
    path: str,
    x: Tensor,
    config: EncoderConfig,
    weights_out: list[Array] | None = None,
) -> Tensor:
    x = T.add(x, T.scale(feed_forward(params, f"{path}.ff1", x), 0.5))
    attended = self_attention(
        params, f"{path}.mhsa", norm(params, f"{path}.mhsa.norm", x), config, weights_out
    )
    x = T.add(x, attended)
    x = T.add(x, conv_module(params, f"{path}.conv", x, config))
    x = T.add(x, T.scale(feed_forward(params, f"{path}.ff2", x), 0.5))
    return norm(params, f"{path}.final_norm", x)


# --- Encoder ---


def encode(
    params: ModelParams,
    features: Tensor | Array,
    config: EncoderConfig,
    *,
    prefix: str = ENCODER_PREFIX,
    retain_layers: bool = False,
    retain_attention: bool = False,
) -> EncoderOutput:
    """Run the input projection and every conformer block over ``features[T', width]``."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    expected = params[f"{prefix}.input.w"].shape[0]
    if x.ndim != 2 or x.shape[1] != expected:
        msg = f"encode: input width {x.shape} does not match expected [T', {expected}]"
        raise ContractError(msg)
    h = linear(params, f"{prefix}.input", x)
    layers: list[Tensor] = []
    attention: list[Array] | None = [] if retain_attention else None
    for i in range(config.n_blocks):
        try:
            h = conformer_block(params, f"{prefix}.block{i}", h, config, attention)
        except ContractError as e:
            msg = f"encoder block {i}: {e}"
            raise ContractError(msg) from e
        if retain_layers:
            layers.append(h)
    return EncoderOutput(encodings=h, layers=layers, attention=attention or [])
