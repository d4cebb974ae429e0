"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new ``Tensor`` that remembers its inputs and a closure
that pushes the output gradient back to them. ``Tensor.backward`` walks the
graph in reverse topological order. Only the ops the ENF model needs are
provided; shapes are checked rather than broadcast, apart from adding a
per-feature bias along the last axis.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # intermediate grads are scratch space; leaves accumulate
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable tensor with Adam moment slots."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _check(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


# --------------------------------------------------------------------------
# Elementwise and linear algebra
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Sum of equal shapes, or ``a`` plus a bias ``b`` along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _check(b.data.ndim == 1 and a.shape[-1:] == b.shape,
               f"cannot add shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def back(g):
        a._accum(g)
        b._accum(g if g.shape == b.shape else g.reshape(-1, b.shape[0]).sum(axis=0))
    return Tensor(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"cannot multiply shapes {a.shape} and {b.shape}")

    def back(g):
        a._accum(g * b.data)
        b._accum(g * a.data)
    return Tensor(a.data * b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * c, (a,), lambda g: a._accum(g * c))


def matmul(a, b) -> Tensor:
    """``(..., k) @ (k, m)``; the right operand is a matrix."""
    a, b = as_tensor(a), as_tensor(b)
    _check(b.data.ndim == 2 and a.shape[-1] == b.shape[0],
           f"cannot matmul shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
    return Tensor(out, (a, b), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            t._accum(piece)
    return Tensor(out, tuple(ts), back)


def take(a, index, axis) -> Tensor:
    """Select one position along ``axis`` (dropping that axis)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        a._accum(full)
    return Tensor(out, (a,), back)


def split_last(a, parts: int):
    """Split the last axis into ``parts`` equal tensors."""
    a = as_tensor(a)
    _check(a.shape[-1] % parts == 0, "last axis not divisible")
    w = a.shape[-1] // parts
    return [_slice_last(a, i * w, (i + 1) * w) for i in range(parts)]


def _slice_last(a, lo, hi) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        a._accum(full)
    return Tensor(a.data[..., lo:hi], (a,), back)


def stack(tensors, axis=1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        for i, t in enumerate(ts):
            t._accum(np.take(g, i, axis=axis))
    return Tensor(out, tuple(ts), back)


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

def _sigmoid(x):
    # past +36 float64 rounds to exactly 1.0 (and past -745 to 0.0); the clip
    # keeps gate values strictly inside (0, 1) at a cost below 1e-15
    x = np.clip(x, -700.0, 36.0)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return Tensor(s, (a,), lambda g: a._accum(g * s * (1 - s)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return Tensor(t, (a,), lambda g: a._accum(g * (1 - t * t)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return Tensor(a.data * m, (a,), lambda g: a._accum(g * m))


def leaky_relu(a, slope=0.01) -> Tensor:
    a = as_tensor(a)
    d = np.where(a.data > 0, 1.0, slope)
    return Tensor(a.data * d, (a,), lambda g: a._accum(g * d))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


# --------------------------------------------------------------------------
# Reductions and losses
# --------------------------------------------------------------------------

def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return Tensor(a.data.mean(), (a,), lambda g: a._accum(np.full(a.shape, g / n)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_op(a) -> Tensor:
    a = as_tensor(a)
    p = softmax(a.data)

    def back(g):
        a._accum(p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return Tensor(p, (a,), back)


PROB_CLAMP = 1e-12


def bce_from_probs(probs, labels) -> Tensor:
    """Mean of ``-ln p[label]`` over the batch with ``p`` clamped to [1e-12, 1 - 1e-12]."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    p2 = probs.data.reshape(-1, probs.shape[-1])
    _check(len(labels) == len(p2), "one label per row required")
    rows = np.arange(len(labels))
    picked = p2[rows, labels]
    clamped = np.clip(picked, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -np.mean(np.log(clamped))

    def back(g):
        d = np.zeros_like(p2)
        inside = (picked > PROB_CLAMP) & (picked < 1 - PROB_CLAMP)
        d[rows, labels] = np.where(inside, -1.0 / (clamped * len(labels)), 0.0)
        probs._accum(g * d.reshape(probs.shape))
    return Tensor(loss, (probs,), back)
