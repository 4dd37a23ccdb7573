"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` (thread-local).  Outside a
tape they still compute values but nothing is recorded, which is the cheap
path for evaluation.  Interior values can be *tapped*: their gradients are
returned by :func:`backward` as detached copies.

Inputs whose ``requires_grad`` flag is off never receive gradient work, so a
pass with frozen weights and a single live embedding tap skips every
weight-gradient product.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class PreconditionError(ValueError):
    """An operation was called outside its domain."""


class UnknownTapError(KeyError):
    """A requested tap was not recorded on the graph being differentiated."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray.  ``backward_fn`` maps the output
    gradient to one gradient (or ``None``) per parent.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name
        if requires_grad:
            tape = _active_tape()
            if tape is not None:
                tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never carries gradient."""
    return Tensor(np.array(x, dtype=DTYPE, copy=True))


def leaf(x, name: str | None = None) -> Tensor:
    """A differentiable leaf (parameter or tapped input)."""
    return Tensor(np.array(x, dtype=DTYPE, copy=True), requires_grad=True, name=name)


class Tape:
    """Records differentiable nodes in creation order.

    Creation order is a valid topological order, so backward walks the
    list in reverse without a graph search.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False)
    if needs and _active_tape() is not None:
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _active_tape().nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def tensor_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


# shape


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # weight shared over leading axes: one flat product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradient scatters back with accumulation."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw)


def take_positions(x: Tensor, rows, cols) -> Tensor:
    """Gather ``x[rows[k], cols[k]]`` from a (batch, n, d) tensor into (k, d)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make(x.data[rows, cols], (x,), bw)


def stop_gradient_shift(x: Tensor, target: np.ndarray) -> Tensor:
    """Value ``x + (target - x)`` with gradient passed straight to ``x``.

    The shift is a constant: no derivative flows through ``target``.
    """
    x = as_tensor(x)
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != x.shape:
        raise DimensionError(f"shift target {target.shape} does not match {x.shape}")
    return _make(x.data + (target - x.data), (x,), lambda g: (g,))


# normalisation and attention


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw)


def masked_softmax_rows(scores, causal: bool = False) -> Tensor:
    """Softmax over the last axis; with ``causal`` the strict upper triangle is 0."""
    scores = as_tensor(scores)
    s = scores.data
    if causal:
        if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
            raise DimensionError(f"causal softmax needs square trailing dims, got {s.shape}")
        n = s.shape[-1]
        future = np.triu(np.ones((n, n), dtype=bool), k=1)
        s = np.where(future, -np.inf, s)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if causal:
        p[..., future] = 0.0

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (scores,), bw)


def softmax_jacobian(row: np.ndarray) -> np.ndarray:
    """Closed-form Jacobian ``A_i (delta_ik - A_k)`` of a softmax row."""
    row = np.asarray(row, dtype=DTYPE)
    return np.diag(row) - np.outer(row, row)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_nll(logits, targets, weights) -> Tensor:
    """``-sum_p w_p log softmax(logits_p)[target_p]`` over rows of 2-D logits."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
        raise DimensionError(
            f"nll: logits {logits.shape}, targets {targets.shape}, weights {weights.shape} do not align"
        )
    rows = np.flatnonzero(weights)
    logp = _log_softmax(logits.data[rows])
    picked = logp[np.arange(rows.size), targets[rows]]
    value = -(weights[rows] * picked).sum()

    def bw(g):
        grad = np.zeros_like(logits.data)
        probs = np.exp(logp)
        probs[np.arange(rows.size), targets[rows]] -= 1.0
        grad[rows] = probs * (weights[rows] * g)[:, None]
        return (grad,)

    return _make(np.asarray(value), (logits,), bw)


def cross_entropy(logits, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over positions where ``loss_mask`` is set."""
    mask = np.asarray(loss_mask, dtype=DTYPE)
    count = mask.sum()
    if count <= 0:
        raise PreconditionError("cross_entropy: loss mask selects no positions")
    return weighted_nll(logits, targets, mask / count)


def attention_block(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    causal: bool = True,
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention on ``x`` of shape (batch, n, d).

    Returns the projected output and the probability tensor
    (batch, heads, n, n) so callers can tap it.
    """
    b, n, d = x.shape
    if d % n_heads:
        raise DimensionError(f"d_model {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(t):
        return transpose(reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = split(matmul(x, wq)), split(matmul(x, wk)), split(matmul(x, wv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = masked_softmax_rows(scores, causal=causal)
    ctx = transpose(matmul(probs, v), (0, 2, 1, 3))
    out = matmul(reshape(ctx, (b, n, d)), wo)
    return out, probs


# differentiation


def backward(loss: Tensor, taps: Iterable[Tensor] = (), tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from each tapped tensor and each differentiable leaf
    (``requires_grad`` with no parents) to a detached gradient array of the
    same shape.  Values that fan out accumulate their gradients.
    """
    if loss.data.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _active_tape()
    taps = list(taps)
    nodes = tape.nodes if tape is not None else []
    on_tape = {id(t) for t in nodes}
    for t in taps:
        if id(t) not in on_tape:
            raise UnknownTapError(f"tap {t!r} is not on the active graph")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(nodes):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    out: dict[Tensor, np.ndarray] = {}
    for t in taps:
        out[t] = np.array(grads.get(id(t), np.zeros_like(t.data)), copy=True)
    for node in nodes:
        if node.backward_fn is None and node not in out:
            out[node] = np.array(grads.get(id(node), np.zeros_like(node.data)), copy=True)
    return out
