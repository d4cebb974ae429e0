"""Layers of the ENF classifier, as functional ops plus small parameter holders.

All ops are batch-first: images are ``(N, H, W, C)``, sequences ``(N, T, D)``
and vectors ``(N, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch
from .tensor import (ACTIVATIONS, Parameter, Tensor, add, as_tensor, concat, matmul, mul,
                     sigmoid, softmax_op, split_last, stack, tanh)


def _check(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


def glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# --------------------------------------------------------------------------
# Convolution and pooling
# --------------------------------------------------------------------------

def conv2d(x, kernels, bias) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    ``x`` is ``(N, H, W, C)``, ``kernels`` ``(k, k, C, F)``, ``bias`` ``(F,)``.
    Implemented as one matmul over im2col patches.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    _check(x.data.ndim == 4, f"conv2d wants (N, H, W, C), got {x.shape}")
    k, k2, c, f = kernels.shape
    _check(k == k2 and k % 2 == 1, "kernel must be square with odd size")
    _check(x.shape[3] == c, f"input has {x.shape[3]} channels, kernel expects {c}")
    _check(bias.shape == (f,), "one bias per output channel")
    n, h, w, _ = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    # (N, H, W, C, k, k) -> (N, H, W, k, k, C)
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n * h * w, k * k * c)
    kmat = kernels.data.reshape(k * k * c, f)
    out = (cols @ kmat + bias.data).reshape(n, h, w, f)

    def back(g):
        g2 = g.reshape(-1, f)
        if kernels.requires_grad:
            kernels._accum((cols.T @ g2).reshape(kernels.shape))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, h, w, k, k, c)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
            x._accum(dxp[:, p:p + h, p:p + w, :])
    return Tensor(out, (x, kernels, bias), back)


def pooled_size(size: int, ceil_mode: bool) -> int:
    return -(-size // 2) if ceil_mode else size // 2


def maxpool2d(x, ceil_mode: bool = False) -> Tensor:
    """2x2 max pooling with stride 2.

    By default an odd trailing row/column is dropped. With ``ceil_mode`` it is
    kept and pooled over the cells that exist. Gradients go to the first
    maximum of each window in row-major order.
    """
    x = as_tensor(x)
    _check(x.data.ndim == 4, f"maxpool2d wants (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    least = 1 if ceil_mode else 2
    _check(h >= least and w >= least, f"maxpool2d needs H, W >= {least}")
    ho, wo = pooled_size(h, ceil_mode), pooled_size(w, ceil_mode)
    buf = np.full((n, 2 * ho, 2 * wo, c), -np.inf)
    hh, ww = min(h, 2 * ho), min(w, 2 * wo)
    buf[:, :hh, :ww] = x.data[:, :hh, :ww]
    win = buf.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, ho, wo, c, 4))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gb = gw.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        dx = np.zeros_like(x.data)
        dx[:, :hh, :ww] = gb[:, :hh, :ww]
        x._accum(dx)
    return Tensor(out, (x,), back)


# --------------------------------------------------------------------------
# Dense, normalisation, dropout
# --------------------------------------------------------------------------

def dense(x, weight, bias, activation: str = "identity") -> Tensor:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    x, weight = as_tensor(x), as_tensor(weight)
    _check(weight.data.ndim == 2 and x.shape[-1] == weight.shape[0],
           f"dense input width {x.shape[-1]} vs weight {weight.shape}")
    return ACTIVATIONS[activation](add(matmul(x, weight), bias))


LN_EPS = 1e-5


def layer_norm(x, gain, bias) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _check(x.shape[-1] >= 2, "layer_norm needs at least 2 features")
    _check(gain.shape == bias.shape == x.shape[-1:], "gain/bias must match the feature axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        d = x.shape[-1]
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accum(inv * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    return Tensor(out, (x, gain, bias), back)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Eval mode (or ``rate == 0``) returns ``x`` unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate), requires_grad=False))


def softmax_head(x, weight, bias) -> Tensor:
    """Probability pair from ``softmax(x W + b)``."""
    return softmax_op(dense(x, weight, bias))


# --------------------------------------------------------------------------
# Parameter holders
# --------------------------------------------------------------------------

class Layer:
    def parameters(self) -> list:
        out = []
        for v in vars(self).values():
            if isinstance(v, Parameter):
                out.append(v)
            elif isinstance(v, Layer):
                out.extend(v.parameters())
            elif isinstance(v, list):
                for item in v:
                    if isinstance(item, Layer):
                        out.extend(item.parameters())
        return out


class Dense(Layer):
    def __init__(self, d_in, d_out, activation, rng, name):
        self.W = Parameter(glorot(rng, (d_in, d_out), d_in, d_out), f"{name}.W")
        self.b = Parameter(np.zeros(d_out), f"{name}.b")
        self.activation = activation

    def __call__(self, x):
        return dense(x, self.W, self.b, self.activation)


class Conv2D(Layer):
    def __init__(self, c_in, c_out, k, rng, name):
        self.K = Parameter(glorot(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out), f"{name}.K")
        self.b = Parameter(np.zeros(c_out), f"{name}.b")

    def __call__(self, x):
        return conv2d(x, self.K, self.b)


class LayerNorm(Layer):
    def __init__(self, d, name):
        self.gain = Parameter(np.ones(d), f"{name}.gain")
        self.bias = Parameter(np.zeros(d), f"{name}.bias")

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


@dataclass
class LstmState:
    y: Tensor
    c: Tensor

    def __post_init__(self):
        _check(self.y.shape == self.c.shape, "hidden and cell state shapes differ")


GATES = ("i", "f", "g", "o")


class LSTM(Layer):
    """One direction. Every gate reads the single concatenation ``[y_{t-1}, x_t]``."""

    def __init__(self, d_in, units, rng, name):
        lim = np.sqrt(1.0 / units)
        self.units, self.d_in = units, d_in
        for gate in GATES:
            setattr(self, f"w_{gate}",
                    Parameter(rng.uniform(-lim, lim, (units + d_in, units)), f"{name}.w_{gate}"))
        for gate in GATES:
            init = np.ones(units) if gate == "f" else np.zeros(units)
            setattr(self, f"b_{gate}", Parameter(init, f"{name}.b_{gate}"))

    def packed(self):
        """Gate weights side by side, so one matmul serves all four gates."""
        return (concat([getattr(self, f"w_{g}") for g in GATES], axis=1),
                concat([getattr(self, f"b_{g}") for g in GATES], axis=0))

    def zero_state(self, batch):
        z = np.zeros((batch, self.units))
        return LstmState(Tensor(z, requires_grad=False), Tensor(z.copy(), requires_grad=False))

    def run(self, seq, reverse=False, state=None):
        """Unroll over ``seq`` of shape ``(N, T, D)``; returns per-step outputs and final state."""
        seq = as_tensor(seq)
        _check(seq.data.ndim == 3 and seq.shape[2] == self.d_in,
               f"LSTM wants (N, T, {self.d_in}), got {seq.shape}")
        n, t_len, _ = seq.shape
        _check(t_len >= 1, "empty sequence")
        w, b = self.packed()
        state = state or self.zero_state(n)
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        outs = [None] * t_len
        for t in steps:
            state = lstm_cell(_step(seq, t), state, w, b)
            outs[t] = state.y
        return outs, state


def _step(seq: Tensor, t: int) -> Tensor:
    def back(g):
        full = np.zeros_like(seq.data)
        full[:, t, :] = g
        seq._accum(full)
    return Tensor(seq.data[:, t, :], (seq,), back)


def lstm_cell(x_t, prev: LstmState, w, b) -> LstmState:
    """One LSTM step.

    ``w`` is ``(units + d_in, 4 * units)`` and ``b`` ``(4 * units,)`` with the
    gate blocks in the order i, f, g, o (see ``LSTM.packed``).
    """
    x_t = as_tensor(x_t)
    _check(w.shape[0] == prev.y.shape[-1] + x_t.shape[-1], "LSTM weight rows != units + input")
    z = add(matmul(concat([prev.y, x_t], axis=-1), w), b)
    zi, zf, zg, zo = split_last(z, 4)
    i, f, o = sigmoid(zi), sigmoid(zf), sigmoid(zo)
    g = tanh(zg)
    c = add(mul(f, prev.c), mul(i, g))
    y = mul(o, tanh(c))
    return LstmState(y, c)


class BiLSTM(Layer):
    def __init__(self, d_in, units, rng, name):
        self.fwd = LSTM(d_in, units, rng, f"{name}.fwd")
        self.bwd = LSTM(d_in, units, rng, f"{name}.bwd")

    def __call__(self, seq):
        """Returns the ``(N, T, 2*units)`` output sequence and the concatenated final states."""
        f_out, f_state = self.fwd.run(seq)
        b_out, b_state = self.bwd.run(seq, reverse=True)
        per_step = [concat([f, bk], axis=-1) for f, bk in zip(f_out, b_out)]
        return stack(per_step, axis=1), concat([f_state.y, b_state.y], axis=-1)


class AttentionFuse(Layer):
    """Sigmoid gate over ``z = [spatial, temporal]``: L -> L -> L/8 -> L -> L, output ``w * z``."""

    def __init__(self, width, rng, name):
        _check(width >= 16, "attention fusion needs L >= 16")
        mid = width // 8
        self.fc1 = Dense(width, width, "relu", rng, f"{name}.fc1")
        self.fc2 = Dense(width, mid, "relu", rng, f"{name}.fc2")
        self.fc3 = Dense(mid, width, "relu", rng, f"{name}.fc3")
        self.gate = Dense(width, width, "sigmoid", rng, f"{name}.gate")
        self.width = width
        self.last_weights = None

    def __call__(self, spatial, temporal):
        z = concat([spatial, temporal], axis=-1)
        _check(z.shape[-1] == self.width, f"fused width {z.shape[-1]} != {self.width}")
        w = self.gate(self.fc3(self.fc2(self.fc1(z))))
        self.last_weights = w.data
        return mul(w, z)


def attention_fuse(spatial, temporal, layer: AttentionFuse) -> Tensor:
    return layer(spatial, temporal)
