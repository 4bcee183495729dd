"""Dense tensors with define-by-run reverse-mode differentiation.

Only the operations the vision transformer needs are provided. A :class:`Tape`
is opened around a forward pass; every operation whose inputs require a
gradient records a node on the innermost active tape, and :func:`backward`
replays those nodes in reverse.

>>> x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_all(mul(x, x))
>>> backward(loss, tape)
>>> x.grad
array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, ShapeError

LN_EPS = 1e-6


class Tensor:
    """An n-dimensional real array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@dataclass
class Tape:
    """Ordered record of operation nodes for one forward pass."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out_values: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(inputs, out, rule))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy-style broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so callers zero
    leaf gradients between steps.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever is left belongs to leaves (parameters / inputs)
    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            leaves[id(inp)] = inp
    leaves[id(loss)] = loss
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None or not t.requires_grad:
            continue
        g = np.asarray(g, dtype=t.values.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be shared across a batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = np.matmul(av, bv)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), a.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    try:
        out = av * bv
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    return _record(out, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    return _record(a.values * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.asarray(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _record(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.values for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, rule)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    out = np.broadcast_to(a.values, shape).copy()
    return _record(out, (a,), lambda g: (_unbroadcast(g, src),))


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Take one slice along ``axis`` (dropping it)."""
    src_shape, dtype = a.shape, a.values.dtype
    out = np.take(a.values, index, axis=axis)

    def rule(g):
        full = np.zeros(src_shape, dtype=dtype)
        sl = [slice(None)] * len(src_shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (a,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting each row's max."""
    y = _kernels.softmax_rows(x.values)
    return _record(y, (x,), lambda g: (_kernels.softmax_rows_backward(y, g),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match axis {n}")
    out, xhat, rstd = _kernels.layer_norm(x.values, gamma.values, beta.values, eps)
    shape = x.shape

    def rule(g):
        gx, gg, gb = _kernels.layer_norm_backward(g, xhat, rstd, gamma.values)
        return gx.reshape(shape), gg, gb

    return _record(out, (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xv = x.values
    return _record(_kernels.gelu(xv), (x,), lambda g: (_kernels.gelu_backward(xv, g),))


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of ``-sum_c t_c log softmax(logits)_c``; targets are constants."""
    lv = logits.values
    t = np.asarray(targets, dtype=lv.dtype)
    if t.shape != lv.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {lv.shape}")
    logp = log_softmax_rows(lv)
    n = lv.shape[0]
    loss = np.asarray(-(t * logp).sum() / n, dtype=lv.dtype)

    def rule(g):
        p = np.exp(logp)
        return ((p * t.sum(axis=-1, keepdims=True) - t) * (g / n),)

    return _record(loss, (logits,), rule)
