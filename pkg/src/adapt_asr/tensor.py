"""Dense float64 tensors with a define-by-run tape for reverse-mode differentiation.

Every forward op checks its operands, computes a fresh numpy array and, when any
operand requires a gradient, records a closure on the current thread's tape.
``Tape.backward`` replays the recorded closures in reverse order exactly once.

Shapes never broadcast except for leading-batch expansion: the smaller operand
of an elementwise op must equal the trailing dimensions of the larger one.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from adapt_asr.errors import ContractError

Array = NDArray[np.float64]
BackwardFn = Callable[[Array], Sequence[Array | None]]

_state = threading.local()


def _grad_enabled() -> bool:
    return bool(getattr(_state, "grad_enabled", True))


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them (inference, finite differences)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A dense row-major float64 array that may participate in the tape."""

    __slots__ = ("_op", "data", "grad", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        self.data: Array = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._op: TapeOp | None = None

    @classmethod
    def _wrap(cls, data: Array, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._op = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def item(self) -> float:
        if self.data.size != 1:
            msg = f"item() needs a single-element tensor, got shape {self.shape}"
            raise ContractError(msg)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        return scale(self, float(other))

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass(eq=False)
class TapeOp:
    """One recorded operation: its inputs, output and backward rule."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    tape: Tape
    index: int


class Tape:
    """Ordered record of differentiable operations, confined to one thread.

    Use as a context manager to make it the recording target::

        with Tape() as tape:
            loss = ...
            tape.backward(loss)
    """

    def __init__(self) -> None:
        self.ops: list[TapeOp] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(
        self,
        name: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward_fn: BackwardFn,
    ) -> TapeOp:
        if self._spent:
            msg = f"cannot record '{name}' on a tape that already ran backward; call reset()"
            raise ContractError(msg)
        op = TapeOp(name, inputs, output, backward_fn, self, len(self.ops))
        self.ops.append(op)
        return op

    def reset(self) -> None:
        self.ops.clear()
        self._spent = False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf."""
        if self._spent:
            msg = "backward() already ran on this tape; call reset() before reusing it"
            raise ContractError(msg)
        if loss.size != 1:
            msg = f"backward() needs a scalar loss, got shape {loss.shape}"
            raise ContractError(msg)
        if not np.isfinite(loss.data).all():
            msg = f"backward() got a non-finite loss {loss.item()}"
            raise ContractError(msg)
        op = loss._op
        if op is None or op.tape is not self or self.ops[op.index] is not op:
            msg = "backward() loss was not produced on this tape"
            raise ContractError(msg)

        pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for current in reversed(self.ops[: op.index + 1]):
            upstream = pending.pop(id(current.output), None)
            if upstream is None:
                continue
            grads = current.backward(upstream)
            for tensor, grad in zip(current.inputs, grads, strict=True):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.data.shape:
                    msg = (
                        f"backward of '{current.name}' produced grad {grad.shape} "
                        f"for input {tensor.shape}"
                    )
                    raise ContractError(msg)
                if tensor._op is None:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    acc = pending.get(key)
                    pending[key] = grad if acc is None else acc + grad
        self._spent = True


def _stack() -> list[Tape]:
    stack: list[Tape] | None = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def current_tape() -> Tape:
    """Return the innermost active tape, creating a thread default if needed."""
    stack = _stack()
    if stack:
        return stack[-1]
    default: Tape | None = getattr(_state, "default", None)
    if default is None or default._spent:
        default = Tape()
        _state.default = default
    return default


def backward(loss: Tensor) -> None:
    """Run backward on the tape that produced ``loss``."""
    if loss._op is None:
        msg = "backward() loss is not on any tape (no input required grad)"
        raise ContractError(msg)
    loss._op.tape.backward(loss)


def _check_finite(name: str, *arrays: Array) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            msg = f"{name}: non-finite input of shape {tuple(arr.shape)}"
            raise ContractError(msg)


def make_op(
    name: str,
    inputs: Sequence[Tensor],
    out: Array,
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap a computed array as an op output, recording it when grads are needed.

    Other modules use this to define fused ops (e.g. the transducer lattice loss).
    """
    if not np.isfinite(out).all():
        msg = f"{name}: produced non-finite output of shape {tuple(out.shape)}"
        raise ContractError(msg)
    needs_grad = _grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs_grad)
    if needs_grad:
        result._op = current_tape().record(name, tuple(inputs), result, backward_fn)
    return result


def _as_tensor(value: Tensor | ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    return grad.reshape(-1, *shape).sum(axis=0)


def _check_expandable(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.shape != big.shape[big.ndim - small.ndim :]:
        msg = f"{name}: shapes {a.shape} and {b.shape} do not conform"
        raise ContractError(msg)


# --- Elementwise arithmetic ---


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_expandable("add", a, b)
    _check_finite("add", a.data, b.data)

    def grad_fn(g: Array) -> tuple[Array, Array]:
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_op("add", (a, b), a.data + b.data, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_expandable("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def grad_fn(g: Array) -> tuple[Array, Array]:
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return make_op("sub", (a, b), a.data - b.data, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_expandable("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def grad_fn(g: Array) -> tuple[Array, Array]:
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_op("mul", (a, b), a.data * b.data, grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    _check_finite("scale", a.data)

    def grad_fn(g: Array) -> tuple[Array]:
        return (g * factor,)

    return make_op("scale", (a,), a.data * factor, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., n, k] @ b[k, m]`` or same-batch ``a[B, n, k] @ b[B, k, m]``."""
    batched = a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0]
    if not (
        (a.ndim >= 2 and b.ndim == 2 and a.shape[-1] == b.shape[0])
        or (batched and a.shape[2] == b.shape[1])
    ):
        msg = f"matmul: shapes {a.shape} and {b.shape} do not conform"
        raise ContractError(msg)
    _check_finite("matmul", a.data, b.data)

    def grad_fn(g: Array) -> tuple[Array, Array]:
        if batched:
            return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g
        flat_a = a.data.reshape(-1, a.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ b.data.T, flat_a.T @ flat_g

    return make_op("matmul", (a, b), a.data @ b.data, grad_fn)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise sum of rows: ``out[i, j] = a[i] + b[j]`` for ``a[N, d]``, ``b[M, d]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        msg = f"outer_add: shapes {a.shape} and {b.shape} do not conform"
        raise ContractError(msg)
    _check_finite("outer_add", a.data, b.data)

    def grad_fn(g: Array) -> tuple[Array, Array]:
        return g.sum(axis=1), g.sum(axis=0)

    return make_op("outer_add", (a, b), a.data[:, None, :] + b.data[None, :, :], grad_fn)


# --- Nonlinearities ---


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x.data)
    out = special.expit(x.data)

    def grad_fn(g: Array) -> tuple[Array]:
        return (g * out * (1.0 - out),)

    return make_op("sigmoid", (x,), out, grad_fn)


def tanh(x: Tensor) -> Tensor:
    _check_finite("tanh", x.data)
    out = np.tanh(x.data)

    def grad_fn(g: Array) -> tuple[Array]:
        return (g * (1.0 - out * out),)

    return make_op("tanh", (x,), out, grad_fn)


def swish(x: Tensor) -> Tensor:
    _check_finite("swish", x.data)
    sig = special.expit(x.data)

    def grad_fn(g: Array) -> tuple[Array]:
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return make_op("swish", (x,), x.data * sig, grad_fn)


def gelu(x: Tensor) -> Tensor:
    _check_finite("gelu", x.data)
    cdf = 0.5 * (1.0 + special.erf(x.data / np.sqrt(2.0)))

    def grad_fn(g: Array) -> tuple[Array]:
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return make_op("gelu", (x,), x.data * cdf, grad_fn)


def softmax_lastdim(x: Tensor, mask: NDArray[np.bool_] | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
    _check_finite("softmax_lastdim", x.data)
    if mask is not None:
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            msg = f"softmax_lastdim: mask {mask.shape} does not fit input {x.shape}"
            raise ContractError(msg) from None
        if not mask.any(axis=-1).all():
            msg = f"softmax_lastdim: a row of input {x.shape} is fully masked"
            raise ContractError(msg)
        logits = np.where(mask, x.data, -np.inf)
    else:
        logits = x.data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def grad_fn(g: Array) -> tuple[Array]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op("softmax_lastdim", (x,), out, grad_fn)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    _check_finite("log_softmax_lastdim", x.data)
    out = x.data - special.logsumexp(x.data, axis=-1, keepdims=True)

    def grad_fn(g: Array) -> tuple[Array]:
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_op("log_softmax_lastdim", (x,), out, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        msg = f"layer_norm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}"
        raise ContractError(msg)
    _check_finite("layer_norm", x.data, gamma.data, beta.data)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def grad_fn(g: Array) -> tuple[Array, Array, Array]:
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_to(g * xhat, gamma.shape), _reduce_to(g, beta.shape)

    return make_op("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, grad_fn)


# --- Sequence ops ---


def conv1d_depthwise(x: Tensor, kernel: Tensor, *, causal: bool = True) -> Tensor:
    """Depthwise 1-D convolution over time of ``x[T, C]`` with ``kernel[K, C]``.

    Causal: tap ``K-1`` reads the current frame and the others read the past.
    Non-causal: the kernel is centred and reaches ``(K-1)//2`` frames ahead.
    """
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        msg = f"conv1d_depthwise: input {x.shape} with kernel {kernel.shape}"
        raise ContractError(msg)
    _check_finite("conv1d_depthwise", x.data, kernel.data)
    n_frames, channels = x.shape
    width = kernel.shape[0]
    right = 0 if causal else (width - 1) // 2
    left = width - 1 - right
    padded = np.concatenate(
        [np.zeros((left, channels)), x.data, np.zeros((right, channels))], axis=0
    )
    out = np.zeros((n_frames, channels))
    for k in range(width):
        out += kernel.data[k] * padded[k : k + n_frames]

    def grad_fn(g: Array) -> tuple[Array, Array]:
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kernel.data)
        for k in range(width):
            gk[k] = (g * padded[k : k + n_frames]).sum(axis=0)
            gpad[k : k + n_frames] += g * kernel.data[k]
        return gpad[left : left + n_frames], gk

    return make_op("conv1d_depthwise", (x, kernel), out, grad_fn)


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    return conv1d_depthwise(x, kernel, causal=True)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.ndim != 2 or (index.size and (index.min() < 0 or index.max() >= table.shape[0])):
        msg = f"embedding_lookup: ids {list(ids)} out of range for table {table.shape}"
        raise ContractError(msg)
    _check_finite("embedding_lookup", table.data)

    def grad_fn(g: Array) -> tuple[Array]:
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return make_op("embedding_lookup", (table,), table.data[index], grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        msg = "concat: no inputs"
        raise ContractError(msg)
    shapes = [t.shape for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim

    def others(shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape[:ax] + shape[ax + 1 :]

    if any(len(s) != ndim or others(s) != others(shapes[0]) for s in shapes):
        msg = f"concat: shapes {shapes} do not conform on axis {axis}"
        raise ContractError(msg)
    _check_finite("concat", *(t.data for t in tensors))
    splits = np.cumsum([s[ax] for s in shapes])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def grad_fn(g: Array) -> list[Array]:
        return list(np.split(g, splits, axis=ax))

    return make_op("concat", tuple(tensors), out, grad_fn)


def slice_along(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        msg = f"slice: [{start}:{stop}] out of range on axis {axis} of {x.shape}"
        raise ContractError(msg)
    _check_finite("slice", x.data)
    index = (slice(None),) * ax + (slice(start, stop),)

    def grad_fn(g: Array) -> tuple[Array]:
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_op("slice", (x,), x.data[index].copy(), grad_fn)


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather rows along axis 0 (repeats allowed)."""
    index = np.asarray(rows, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        msg = f"take_rows: rows {list(rows)} out of range for {x.shape}"
        raise ContractError(msg)
    _check_finite("take_rows", x.data)

    def grad_fn(g: Array) -> tuple[Array]:
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_op("take_rows", (x,), x.data[index], grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        msg = f"reshape: cannot view {x.shape} as {tuple(shape)}"
        raise ContractError(msg) from None

    def grad_fn(g: Array) -> tuple[Array]:
        return (g.reshape(x.shape),)

    return make_op("reshape", (x,), out.copy(), grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    perm = tuple(axes)
    if sorted(perm) != list(range(x.ndim)):
        msg = f"transpose: axes {perm} invalid for {x.shape}"
        raise ContractError(msg)
    inverse = tuple(int(i) for i in np.argsort(perm))

    def grad_fn(g: Array) -> tuple[Array]:
        return (g.transpose(inverse),)

    return make_op("transpose", (x,), np.ascontiguousarray(x.data.transpose(perm)), grad_fn)


# --- Reductions and losses ---


def sum(x: Tensor, axis: int | None = None) -> Tensor:
    _check_finite("sum", x.data)

    def grad_fn(g: Array) -> tuple[Array]:
        if axis is None:
            return (np.full_like(x.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_op("sum", (x,), np.asarray(x.data.sum(axis=axis)), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if x.size == 0:
        msg = f"mean: empty input {x.shape}"
        raise ContractError(msg)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def binary_cross_entropy(p: Tensor, target: ArrayLike, clamp: float = 1e-6) -> Tensor:
    """Mean BCE between probabilities ``p`` and binary targets (same shape)."""
    c = np.asarray(target, dtype=np.float64)
    if c.shape != p.shape:
        msg = f"binary_cross_entropy: probabilities {p.shape} vs targets {c.shape}"
        raise ContractError(msg)
    if p.size == 0:
        msg = "binary_cross_entropy: empty input"
        raise ContractError(msg)
    _check_finite("binary_cross_entropy", p.data, c)
    q = np.clip(p.data, clamp, 1.0 - clamp)
    loss = -np.mean(c * np.log(q) + (1.0 - c) * np.log(1.0 - q))

    def grad_fn(g: Array) -> tuple[Array]:
        inside = (p.data > clamp) & (p.data < 1.0 - clamp)
        gp = -(c / q - (1.0 - c) / (1.0 - q)) / p.size
        return (float(g) * gp * inside,)

    return make_op("binary_cross_entropy", (p,), np.asarray(loss), grad_fn)


# --- Finite-difference checking ---


def gradcheck(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    *,
    eps: float = 1e-6,
) -> float:
    """Worst relative error between backward() and central finite differences.

    ``fn`` must rebuild the scalar loss from ``leaves`` on every call (and reseed
    any sampling it does). The error per leaf is ``|a - n| / max(|a|, |n|)``
    in the Euclidean norm.
    """
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)

    worst = 0.0
    with no_grad():
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = np.zeros(leaf.size)
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = fn().item()
                flat[i] = original - eps
                minus = fn().item()
                flat[i] = original
                numeric[i] = (plus - minus) / (2.0 * eps)
            diff = float(np.linalg.norm(analytic.reshape(-1) - numeric))
            denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
            worst = max(worst, diff / denom)
    return worst
