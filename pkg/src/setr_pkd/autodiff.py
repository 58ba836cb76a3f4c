"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the primitives needed by the SETR encoder and the distillation losses are
provided.  Operations record themselves on the active :class:`Tape` when at
least one input requires a gradient; outside a :func:`recording` block they
just compute values, which is how evaluation runs.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tape",
    "Value",
    "recording",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "swap_last",
    "reshape",
    "broadcast_to",
    "concat",
    "getitem",
    "sum",
    "mean",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "cross_entropy",
    "OptState",
    "adamw_step",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Append-only record of the non-leaf nodes of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Value] = []

    def record(self, node: "Value") -> None:
        node.node_id = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    """Record every differentiable operation issued inside the block."""
    tape = Tape()
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


class Value:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.parents: tuple[Value, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data: np.ndarray, parents: Sequence[Value], backward_fn: BackwardFn) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.node_id = None
    out.tape = None
    out.name = None
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _ACTIVE[-1].record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Value) -> None:
    """Populate ``grad`` on every node reachable from a scalar ``root``.

    Gradients accumulate into leaves, so call ``zero_grad`` between steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is None or root.node_id is None:
        raise ValueError("root was not recorded on a tape (no input requires grad?)")
    root.grad = np.ones_like(root.data)
    for node in reversed(root.tape.nodes[: root.node_id + 1]):
        if node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Value, c: float) -> Value:
    """Multiply by a constant scalar."""
    return _node(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Value) -> Value:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Value) -> Value:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


# -- shape -----------------------------------------------------------------


def matmul(a, b) -> Value:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
            _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape),
        )

    return _node(ad @ bd, (a, b), grad_fn)


def transpose(a: Value, axes: Sequence[int]) -> Value:
    inverse = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Value) -> Value:
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Value, shape: Sequence[int]) -> Value:
    original = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def broadcast_to(a: Value, shape: Sequence[int]) -> Value:
    original = a.shape
    data = np.broadcast_to(a.data, shape).copy()
    return _node(data, (a,), lambda g: (_unbroadcast(g, original),))


def concat(values: Iterable[Value], axis: int = 0) -> Value:
    values = [_lift(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([v.data for v in values], axis=axis), values, grad_fn)


def getitem(a: Value, index) -> Value:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _node(np.array(a.data[index]), (a,), grad_fn)


def sum(a: Value, axis=None, keepdims: bool = False) -> Value:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn)


def mean(a: Value, axis=None, keepdims: bool = False) -> Value:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- nonlinearities --------------------------------------------------------


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Value) -> Value:
    """Softmax over the last axis, with max subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax received non-finite input")
    y = _softmax_np(x.data)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), grad_fn)


def log_softmax(x: Value) -> Value:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_softmax received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _node(y, (x,), grad_fn)


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a last axis of size >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gamma.data

    def grad_fn(g):
        dxhat = g * gd
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Value) -> Value:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def grad_fn(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return _node(xd * cdf, (x,), grad_fn)


def dropout(x: Value, rate: float, rng: np.random.Generator | None, training: bool) -> Value:
    """Inverted dropout; identity in evaluation mode or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Value, labels, class_weights: Sequence[float] | None = None) -> Value:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(C,)`` or ``(B, C)``.  With ``class_weights`` the mean is
    weighted, ``sum(w_y * nll) / sum(w_y)``.
    """
    data = logits.data
    single = data.ndim == 1
    z = data[None, :] if single else data
    n, c = z.shape
    if c < 2:
        raise ValueError("cross_entropy needs at least two classes")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if np.any((y < 0) | (y >= c)):
        raise ValueError(f"label out of range [0, {c}): {y.tolist()}")
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[y]
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    total_w = w.sum()
    loss = -(w * logp[rows, y]).sum() / total_w

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        d *= (w / total_w)[:, None] * g
        return (d[0] if single else d,)

    return _node(np.asarray(loss), (logits,), grad_fn)


# -- optimizer -------------------------------------------------------------


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState) -> None:
    """One AdamW update, in place on ``params``.

    Weight decay is decoupled and applied before the moment update.  A step
    with any non-finite gradient is rejected and leaves everything untouched.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
