"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps a value array plus, while gradients are enabled, the closure
needed to push a gradient back to its parents. backward() walks the graph
once per scalar loss and returns gradients keyed by parameter tensor, which
keeps per-loss gradient accounting (and therefore gradient routing) exact
rather than accumulated in place.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "grad", "name", "track", "_parents", "_vjp")

    def __init__(self, values, track: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self.track = track
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    # Operators cover the hot arithmetic; everything else is a module function.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values, name: str) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), track=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, vjp) -> Tensor:
    track = _GRAD_ENABLED and any(p is not None and p.track for p in parents)
    out = Tensor(values, track=track)
    if track:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values @ b.values

    def vjp(g):
        bt = np.swapaxes(b.values, -1, -2)
        at = np.swapaxes(a.values, -1, -2)
        return (
            _unbroadcast(g @ bt, a.values.shape),
            _unbroadcast(at @ g, b.values.shape),
        )

    return _make(out, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """Affine map over the last axis: x @ w + b in one graph node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.values @ w.values + b.values
    d_in, d_out = w.values.shape

    def vjp(g):
        gx = g @ w.values.T
        gw = x.values.reshape(-1, d_in).T @ g.reshape(-1, d_out)
        gb = g.reshape(-1, d_out).sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, w, b), vjp)


def dot_last(x, w) -> Tensor:
    """Contract the last axis of x with a vector w: (..., d) x (d,) -> (...)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.values @ w.values

    def vjp(g):
        gx = g[..., None] * w.values
        gw = (x.values * g[..., None]).reshape(-1, w.values.shape[0]).sum(axis=0)
        return gx, gw

    return _make(out, (x, w), vjp)


def transpose_last2(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.values, -1, -2), (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.values.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(x.values.reshape(shape), (x,), vjp)


def moveaxes(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(x.values.transpose(axes), (x,), vjp)


def concat_last(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.values.shape[-1] for p in parts]
    out = np.concatenate([p.values for p in parts], axis=-1)

    def vjp(g):
        grads, lo = [], 0
        for w in widths:
            grads.append(g[..., lo : lo + w])
            lo += w
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


def slice_tensor(x, key) -> Tensor:
    """Basic slicing (no repeated indices); gradient scatters back."""
    x = as_tensor(x)
    shape = x.values.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[key] += g
        return (gx,)

    return _make(x.values[key], (x,), vjp)


def broadcast_to_shape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.values.shape

    def vjp(g):
        return (_unbroadcast(g, src),)

    return _make(np.broadcast_to(x.values, shape).copy(), (x,), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.values > 0

    def vjp(g):
        return (g * keep,)

    return _make(np.where(keep, x.values, 0.0), (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)

    def vjp(g):
        return (g * out,)

    return _make(out, (x,), vjp)


def log(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        # Guard against 0/0 when a clamp already zeroed the incoming gradient.
        return (g / np.maximum(x.values, 1e-300),)

    return _make(np.log(x.values), (x,), vjp)


def maximum_const(x, c: float) -> Tensor:
    x = as_tensor(x)
    keep = x.values > c

    def vjp(g):
        return (g * keep,)

    return _make(np.maximum(x.values, c), (x,), vjp)


def masked_fill(x, keep_mask, fill: float) -> Tensor:
    """Replace entries where keep_mask is falsy by fill; no gradient there."""
    x = as_tensor(x)
    keep = np.asarray(keep_mask, dtype=bool)

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return _make(np.where(keep, x.values, fill), (x,), vjp)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; masked entries get probability exactly 0."""
    x = as_tensor(x)
    v = x.values
    if mask is not None:
        v = np.where(np.asarray(mask, dtype=bool), v, -1e9)
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        gx = p * (g - inner)
        if mask is not None:
            gx = np.where(np.asarray(mask, dtype=bool), gx, 0.0)
        return (gx,)

    return _make(p, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; a constant row maps to the bias (zeros by default)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv_std
    out = gain.values * xhat + bias.values
    d = v.shape[-1]

    def vjp(g):
        gh = g * gain.values
        gx = inv_std * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0).reshape(gain.values.shape)
        gbias = g.reshape(-1, d).sum(axis=0).reshape(bias.values.shape)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


def depthwise_conv1d(x, w, b) -> Tensor:
    """Per-channel 1D convolution with same zero padding.

    x: (B, T, C); w: (K, C) with K odd; b: (C,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, T, C = x.values.shape
    K = w.values.shape[0]
    pad = K // 2
    xp = np.pad(x.values, ((0, 0), (pad, pad), (0, 0)))
    out = np.broadcast_to(b.values, (B, T, C)).copy()
    for k in range(K):
        out += xp[:, k : k + T, :] * w.values[k]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.values)
        for k in range(K):
            gxp[:, k : k + T, :] += g * w.values[k]
            gw[k] = (xp[:, k : k + T, :] * g).sum(axis=(0, 1))
        gb = g.sum(axis=(0, 1))
        return gxp[:, pad : pad + T, :], gw, gb

    return _make(out, (x, w, b), vjp)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.values[ids], (table,), vjp)


def gather_index(x, idx) -> Tensor:
    """Pick x[i, idx[i]] for each row i: (B, T), (B,) -> (B,)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.values.shape[0])

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.values[rows, idx], (x,), vjp)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.values.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _make(x.values.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.values.shape
    if axis is None:
        count = x.values.size
    else:
        count = shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape).copy(),)

    return _make(x.values.mean(axis=axis, keepdims=keepdims), (x,), vjp)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.values.shape) >= rate) / (1.0 - rate)

    def vjp(g):
        return (g * keep,)

    return _make(x.values * keep, (x,), vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and p.track and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor, params) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar root with respect to each tensor in params.

    Unreached parameters get exact zero arrays. The graph is left intact, so
    several losses sharing one forward pass can each run their own backward.
    """
    if root.values.ndim != 0:
        raise ValueError(f"backward expects a scalar, got shape {root.values.shape}")
    params = list(params)
    wanted = set(id(p) for p in params)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    if root.track:
        for node in reversed(_toposort(root)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if parent is None or pg is None or not parent.track:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            if id(node) not in wanted:
                del grads[id(node)]
    return {p: grads.get(id(p), np.zeros_like(p.values)) for p in params}
