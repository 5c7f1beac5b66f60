"""Dense float64 tensors with reverse-mode differentiation on a recording tape.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and
every differentiable primitive appends one node to the ambient :class:`Tape`.
``Tape.gradients`` then replays the nodes in reverse creation order, which is
a valid reverse topological order because an operation's inputs always exist
before its output (a Wengert list).

Everything runs in 64-bit floats.  Tensors are immutable values once created;
a tape is confined to one thread between forward and backward.  When no tape
is active, the primitives degrade to plain numpy calls, which keeps sampling
and other inference paths fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation

Array = np.ndarray


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """A dense float64 array plus a leaf-parameter marker."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and arrays are wrapped on the fly.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(x) -> Tensor:
    """Wrap ``x`` as a constant tensor (no-op on tensors)."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    """Wrap ``x`` as a trainable leaf."""
    return Tensor(x, requires_grad=True)


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives.

    Usage::

        with Tape() as tape:
            loss = model_loss(...)
        grads = tape.gradients(loss, params)

    Gradients of parameters the loss never touched come back as exact zeros.
    """

    def __init__(self):
        # (output, parents, backward) triples in execution order.
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[Array]:
        """Accumulated d(loss)/d(param) for each entry of ``params``."""
        if loss.size != 1:
            raise ContractViolation("backward requires a scalar loss")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def record_op(out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Register a primitive on the active tape (if any) and return ``out``.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    Custom fused primitives outside this module hook in through this call.
    """
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1]._nodes.append((out, parents, backward))
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor]) -> list[Array]:
    """Convenience alias for ``tape.gradients(loss, params)``."""
    return tape.gradients(loss, params)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data + b.data)
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data - b.data)
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data * b.data)
    return record_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data / b.data)
    return record_op(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = tensor(a)
    out = Tensor(-a.data)
    return record_op(out, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return record_op(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    # Stable logistic via logaddexp.
    y = np.exp(-np.logaddexp(0.0, -a.data))
    out = Tensor(y)
    return record_op(out, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return record_op(out, (a,), lambda g: (g * y,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return record_op(out, (a,), lambda g: (g / (2.0 * y),))


def softplus(a) -> Tensor:
    a = tensor(a)
    y = np.logaddexp(0.0, a.data)
    out = Tensor(y)
    sig = np.exp(-np.logaddexp(0.0, -a.data))
    return record_op(out, (a,), lambda g: (g * sig,))


def square(a) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data * a.data)
    return record_op(out, (a,), lambda g: (g * 2.0 * a.data,))


def maximum_scalar(a, c: float) -> Tensor:
    """Elementwise max(a, c); the gradient follows ``a`` on ties."""
    a = tensor(a)
    out = Tensor(np.maximum(a.data, c))
    mask = a.data >= c
    return record_op(out, (a,), lambda g: (g * mask,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record_op(out, (a,), _bw)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return record_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = tensor(a)
    if a.ndim != 2:
        raise ContractViolation(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)
    return record_op(out, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op(out, tuple(parts), _bw)


def split(a, sizes: Sequence[int], axis: int = 0) -> tuple[Tensor, ...]:
    a = tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ContractViolation(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)
        part = Tensor(a.data[index].copy())

        def _bw(g, index=index):
            full = np.zeros(a.shape)
            full[index] = g
            return (full,)

        outs.append(record_op(part, (a,), _bw))
        start += size
    return tuple(outs)


def reverse(a, axis: int = 0) -> Tensor:
    a = tensor(a)
    out = Tensor(np.flip(a.data, axis=axis).copy())
    return record_op(out, (a,), lambda g: (np.flip(g, axis=axis).copy(),))


# ---------------------------------------------------------------------------
# Fused neural-net primitives
# ---------------------------------------------------------------------------

def softmax(a) -> Tensor:
    """Row-stable softmax over the last axis."""
    a = tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(out, (a,), _bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def _bw(g):
        dxh = g * gain.data
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
        dx = (dxh - m1 - xhat * m2) * inv
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        dbias = g.sum(axis=reduce_axes) if reduce_axes else g
        return (dx, dgain.reshape(gain.shape), dbias.reshape(bias.shape))

    return record_op(out, (x, gain, bias), _bw)


def conv1d(x, w, bias=None, mode: str = "non-causal") -> Tensor:
    """Temporal convolution of a (T, C_in) sequence with a (K, C_in, C_out) kernel.

    Zero padding keeps the output length at T: symmetric (K-1)/2 on both sides
    for non-causal mode (K must be odd), K-1 on the left for causal mode.
    """
    x, w = tensor(x), tensor(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ContractViolation(f"conv1d expects (T,C_in) and (K,C_in,C_out), got {x.shape}, {w.shape}")
    t_len, c_in = x.shape
    k, wc_in, c_out = w.shape
    if t_len < 1:
        raise ContractViolation("conv1d needs input length >= 1")
    if wc_in != c_in:
        raise ContractViolation(f"kernel expects {wc_in} input channels, input has {c_in}")
    if mode == "non-causal":
        if k % 2 == 0:
            raise ContractViolation("non-causal conv1d requires an odd kernel width")
        lp = rp = (k - 1) // 2
    elif mode == "causal":
        lp, rp = k - 1, 0
    else:
        raise ConfigError(f"unknown conv1d mode {mode!r}")

    xp = np.pad(x.data, ((lp, rp), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=0)  # (T, C_in, K)
    y = np.einsum("tck,kco->to", windows, w.data, optimize=True)
    if bias is not None:
        bias = tensor(bias)
        y = y + bias.data
    out = Tensor(y)

    def _bw(g):
        dw = np.einsum("tck,to->kco", windows, g, optimize=True)
        dxp = np.zeros_like(xp)
        for kk in range(k):
            dxp[kk:kk + t_len] += g @ w.data[kk].T
        dx = dxp[lp:lp + t_len]
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=0))

    parents = (x, w) if bias is None else (x, w, bias)
    return record_op(out, parents, _bw)


@dataclass
class AttentionParams:
    """Projection weights for one attention unit.

    The key projection carries no bias: softmax is invariant to per-row
    constant logit shifts, so a key bias would be a dead parameter.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @staticmethod
    def create(dim: int, rng: np.random.Generator) -> "AttentionParams":
        def w():
            return parameter(xavier(rng, dim, dim))

        def b():
            return parameter(np.zeros(dim))

        return AttentionParams(w(), b(), w(), w(), b(), w(), b())

    def named(self) -> dict[str, Tensor]:
        return {
            "wq": self.wq, "bq": self.bq, "wk": self.wk,
            "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo,
        }


def multi_head_attention(query, key, value, heads: int, params: AttentionParams,
                         return_weights: bool = False):
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``query`` is (T_q, d); ``key`` and ``value`` are (T_k, d).  The feature
    axis is split evenly across heads after the input projections, each head
    attends with scale 1/sqrt(d/heads), and the concatenated result passes
    through the output projection.
    """
    query, key, value = tensor(query), tensor(key), tensor(value)
    d = query.shape[1]
    if d % heads != 0:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    if key.shape[0] != value.shape[0]:
        raise ContractViolation("key and value lengths differ")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    q = add(matmul(query, params.wq), params.bq)
    k = matmul(key, params.wk)
    v = add(matmul(value, params.wv), params.bv)
    q_heads = split(q, [dh] * heads, axis=1)
    k_heads = split(k, [dh] * heads, axis=1)
    v_heads = split(v, [dh] * heads, axis=1)

    outs, weights = [], []
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        logits = mul(matmul(qh, transpose(kh)), scale)
        attn = softmax(logits)
        outs.append(matmul(attn, vh))
        weights.append(attn)
    merged = concat(outs, axis=1)
    out = add(matmul(merged, params.wo), params.bo)
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# Init helpers and embeddings
# ---------------------------------------------------------------------------

def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, (fan_in, fan_out))


def sinusoidal_table(length: int, dim: int) -> Array:
    """Classic sine/cosine positional table of shape (length, dim)."""
    if dim % 2 != 0:
        raise ConfigError("sinusoidal table needs an even dimension")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = pos * freqs[None, :]
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def sinusoidal_embedding(position: float, dim: int) -> Array:
    """One row of the sinusoidal table, for scalar positions such as step ids."""
    if dim % 2 != 0:
        raise ConfigError("sinusoidal embedding needs an even dimension")
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = position * freqs
    out = np.zeros(dim)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def central_differences(f: Callable[[], Tensor], params: Sequence[Tensor],
                        step: float = 1e-5) -> list[Array]:
    """Numerical gradient of ``f()`` for each parameter via central differences."""
    out = []
    for p in params:
        flat = p.data.ravel()
        grad = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * step)
        out.append(grad.reshape(p.shape))
    return out


def max_relative_error(analytic: Sequence[Array], numeric: Sequence[Array]) -> float:
    """max over coordinates of |a - n| / max(|a|, |n|, 1e-8)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.ravel(), n.ravel()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f()`` and central differences.

    ``f`` must be deterministic (fix seeds before calling).  The relative error
    for one coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    with Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)
    return max_relative_error(analytic, central_differences(f, params, step))
