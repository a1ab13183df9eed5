"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is what a small transformer encoder needs: matmul, bias-add,
elementwise arithmetic, softmax, layer norm, gelu, embedding lookup, the
two losses, and fused attention / feed-forward blocks for the hot path.
Everything is 64-bit and deterministic; a Graph records ops in creation
order and replays them in reverse.

Broadcasting is deliberately restricted: `add` broadcasts only a 1-D bias
over the last dimension, `matmul` accepts a 2-D right operand against any
leading dims or two operands with identical leading dims. Anything else is
a shape error.
"""

from __future__ import annotations

import math
import struct
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "take_position",
    "mask_attention_scores",
    "fused_attention",
    "fused_ffn",
    "sum_all",
    "cross_entropy",
    "mean_squared_error",
    "save_tensor",
    "load_tensor",
]


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    Tensors constructed directly (leaves, e.g. parameters) allocate their
    gradient buffer eagerly so an untouched parameter reads as zero
    gradient; op outputs allocate lazily on first accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _graph_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Tape of recorded operations, in creation order.

    Use as a context manager around a forward pass; `backward` walks the
    tape once, in reverse creation order. Graphs are confined to one
    thread; independent graphs on different threads do not interact.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _graph_stack().pop()
        assert popped is self

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(_Node(out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dTensor into `.grad` of every participating tensor."""
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward_fn(g)


def _result(out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    graph = active_graph()
    out = Tensor(out_data)
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True  # grad buffer stays lazy
        graph.record(out, backward_fn)
    return out


def _weight_grad(x_data: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(x @ W) / dW summed over leading dims: x (..., m, k), g (..., m, n)."""
    k = x_data.shape[-1]
    n = g.shape[-1]
    return x_data.reshape(-1, k).T @ g.reshape(-1, n)


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may also be a 1-D bias over a's last dimension."""
    if a.shape == b.shape:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(_bias_grad(g))
    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    factor = float(factor)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * factor)

    return _result(a.data * factor, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: (..., m, k) @ (k, n) for weight application, and
    (..., m, k) @ (..., k, n) with identical leading dims for batched
    products inside attention.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    if b.ndim == 2:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(_weight_grad(a.data, g))
    elif a.shape[:-2] == b.shape[:-2]:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)
    else:
        raise ValueError(
            f"matmul: leading dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward)


def _softmax_forward(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`. Rows of -inf scores become 0."""
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax: axis {axis} invalid for shape {x.shape}")
    probs = _softmax_forward(x.data, axis)

    def backward(g):
        if x.requires_grad:
            inner = (g * probs).sum(axis=axis, keepdims=True)
            x.accumulate_grad(probs * (g - inner))

    return _result(probs, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match feature dim {d}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(_bias_grad(g))
        if gain.requires_grad:
            gain.accumulate_grad((g * normed).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gn = g * gain.data
            x.accumulate_grad(inv_std * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - normed * (gn * normed).mean(axis=-1, keepdims=True)
            ))

    return _result(normed * gain.data + bias.data, (x, gain, bias), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (gelu(x), tanh term) with the tanh cached for backward."""
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d gelu / dx given the cached tanh term."""
    du = _GELU_C * (1.0 + 3 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation, smooth everywhere)."""
    out, t = _gelu_forward(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * _gelu_backward(x.data, t))

    return _result(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return _result(table.data[ids], (table,), backward)


def take_position(x: Tensor, position: int) -> Tensor:
    """Select one sequence position: (B, L, d) -> (B, d)."""
    if not 0 <= position < x.shape[1]:
        raise IndexError(f"take_position: {position} out of range for shape {x.shape}")

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, position, :] += g

    return _result(x.data[:, position, :].copy(), (x,), backward)


def _check_key_mask(key_mask: np.ndarray, batch: int, length: int) -> np.ndarray:
    key_mask = np.asarray(key_mask, dtype=np.float64)
    if key_mask.shape != (batch, length):
        raise ValueError(
            f"mask shape {key_mask.shape} does not match ({batch}, {length})"
        )
    if not np.isin(key_mask, (0.0, 1.0)).all():
        raise ValueError("attention mask entries must be 0 or 1")
    if (key_mask.sum(axis=-1) == 0).any():
        raise ValueError("attention mask leaves a sequence with no unmasked position")
    return key_mask


def mask_attention_scores(scores: Tensor, key_mask: np.ndarray) -> Tensor:
    """Set scores of masked-out keys to -inf before softmax.

    `key_mask` is a constant (B, L) array of 0/1; it broadcasts over heads
    and query positions. Every sequence must keep at least one real key.
    """
    key_mask = _check_key_mask(key_mask, scores.shape[0], scores.shape[-1])
    keep = key_mask[:, None, None, :]
    masked = np.where(keep > 0, scores.data, -np.inf)

    def backward(g):
        if scores.requires_grad:
            scores.accumulate_grad(g * keep)

    return _result(masked, (scores,), backward)


def fused_attention(hidden: Tensor, key_mask: np.ndarray, heads: int,
                    wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                    wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor):
    """Masked multi-head self-attention as one taped op.

    hidden is (B, L, d); returns (output (B, L, d), probs (B, heads, L, L))
    where probs are the post-softmax attention maps with masked keys at
    exactly zero. Equivalent to composing the elementary ops, with a
    hand-written backward for speed.
    """
    b, l, d = hidden.shape
    if d % heads != 0:
        raise ValueError(f"heads ({heads}) must divide dim ({d})")
    hd = d // heads
    key_mask = _check_key_mask(key_mask, b, l)
    x = hidden.data

    def split(m):  # (B, L, d) -> (B, h, L, hd)
        return m.reshape(b, l, heads, hd).transpose(0, 2, 1, 3)

    def merge(m):  # (B, h, L, hd) -> (B, L, d)
        return np.ascontiguousarray(m.transpose(0, 2, 1, 3)).reshape(b, l, d)

    q = split(x @ wq.data + bq.data)
    k = split(x @ wk.data + bk.data)
    v = split(x @ wv.data + bv.data)
    inv_scale = 1.0 / math.sqrt(hd)
    scores = (q @ np.swapaxes(k, -1, -2)) * inv_scale
    masked = np.where(key_mask[:, None, None, :] > 0, scores, -np.inf)
    probs = _softmax_forward(masked, axis=-1)
    context = merge(probs @ v)
    out_data = context @ wo.data + bo.data

    params = (wq, bq, wk, bk, wv, bv, wo, bo)

    def backward(g):
        if wo.requires_grad:
            wo.accumulate_grad(_weight_grad(context, g))
        if bo.requires_grad:
            bo.accumulate_grad(_bias_grad(g))
        d_context = split(g @ wo.data.T)
        d_probs = d_context @ np.swapaxes(v, -1, -2)
        d_v = np.swapaxes(probs, -1, -2) @ d_context
        inner = (d_probs * probs).sum(axis=-1, keepdims=True)
        d_scores = probs * (d_probs - inner) * inv_scale
        d_q = merge(d_scores @ k)
        d_k = merge(np.swapaxes(d_scores, -1, -2) @ q)
        d_v = merge(d_v)
        for w_t, b_t, grad in ((wq, bq, d_q), (wk, bk, d_k), (wv, bv, d_v)):
            if w_t.requires_grad:
                w_t.accumulate_grad(_weight_grad(x, grad))
            if b_t.requires_grad:
                b_t.accumulate_grad(_bias_grad(grad))
        if hidden.requires_grad:
            hidden.accumulate_grad(d_q @ wq.data.T + d_k @ wk.data.T
                                   + d_v @ wv.data.T)

    out = _result(out_data, (hidden, *params), backward)
    return out, probs


def fused_ffn(hidden: Tensor, w1: Tensor, b1: Tensor,
              w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise feed-forward (linear, gelu, linear) as one taped op."""
    x = hidden.data
    pre = x @ w1.data + b1.data
    act, t = _gelu_forward(pre)
    out_data = act @ w2.data + b2.data

    def backward(g):
        if w2.requires_grad:
            w2.accumulate_grad(_weight_grad(act, g))
        if b2.requires_grad:
            b2.accumulate_grad(_bias_grad(g))
        d_act = g @ w2.data.T
        d_pre = d_act * _gelu_backward(pre, t)
        if w1.requires_grad:
            w1.accumulate_grad(_weight_grad(x, d_pre))
        if b1.requires_grad:
            b1.accumulate_grad(_bias_grad(d_pre))
        if hidden.requires_grad:
            hidden.accumulate_grad(d_pre @ w1.data.T)

    return _result(out_data, (hidden, w1, b1, w2, b2), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)

    return _result(np.asarray(x.data.sum()), (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            grad = np.exp(log_probs)
            grad[np.arange(n), labels] -= 1.0
            logits.accumulate_grad((float(g) / n) * grad)

    return _result(np.asarray(loss), (logits,), backward)


def mean_squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error between (B, 1) predictions and (B,) targets."""
    target = np.asarray(target, dtype=np.float64)
    flat = pred.data.reshape(-1)
    if flat.shape != target.shape:
        raise ValueError(
            f"mean_squared_error: shapes {pred.shape} and {target.shape} disagree"
        )
    diff = flat - target

    def backward(g):
        if pred.requires_grad:
            pred.accumulate_grad((float(g) * 2.0 / diff.size) * diff.reshape(pred.shape))

    return _result(np.asarray((diff * diff).mean()), (pred,), backward)


_MAGIC = b"HSTN"


def save_tensor(path, array) -> None:
    """Write a float64 array: magic, ndim, dims (little-endian int64), raw data."""
    data = array.data if isinstance(array, Tensor) else np.asarray(array)
    data = np.ascontiguousarray(data, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<q", data.ndim))
        f.write(struct.pack(f"<{data.ndim}q", *data.shape))
        f.write(data.astype("<f8", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read an array written by `save_tensor`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor file (bad magic {magic!r})")
        (ndim,) = struct.unpack("<q", f.read(8))
        shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(f.read(8 * count), dtype="<f8", count=count)
    return data.reshape(shape).astype(np.float64)
