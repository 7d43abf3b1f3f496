"""Parameter constructors and forward helpers shared by every network component."""

from __future__ import annotations

import numpy as np

from adapt_asr import tensor as T
from adapt_asr.optim import ModelParams, component_rng
from adapt_asr.tensor import Tensor


def add_linear(params: ModelParams, path: str, fan_in: int, fan_out: int, seed: int) -> None:
    rng = component_rng(seed, path)
    params.add(f"{path}.w", rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
    params.add(f"{path}.b", np.zeros(fan_out))


def add_norm(params: ModelParams, path: str, width: int) -> None:
    params.add(f"{path}.gamma", np.ones(width))
    params.add(f"{path}.beta", np.zeros(width))


def add_mlp(params: ModelParams, path: str, dims: list[int], seed: int) -> None:
    """Stack of linear layers ``dims[0] -> dims[1] -> ... -> dims[-1]``."""
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:], strict=True)):
        add_linear(params, f"{path}.{i}", fan_in, fan_out, seed)


def linear(params: ModelParams, path: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, params[f"{path}.w"]), params[f"{path}.b"])


def norm(params: ModelParams, path: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{path}.gamma"], params[f"{path}.beta"])


def mlp(params: ModelParams, path: str, x: Tensor, depth: int) -> Tensor:
    """Linear layers with swish between them (no activation after the last)."""
    for i in range(depth):
        x = linear(params, f"{path}.{i}", x)
        if i < depth - 1:
            x = T.swish(x)
    return x
