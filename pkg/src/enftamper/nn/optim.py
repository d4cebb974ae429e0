"""Adam and a finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Parameter, Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(params: Iterable[Parameter], lr: float, t: int,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update in place; ``t`` counts from 1."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * g * g
        p.data -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)


FD_STEP = 1e-4


def relative_error(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def grad_check(loss_fn: Callable[[], Tensor], params: list[Parameter],
               step: float = FD_STEP, max_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values and
    return a scalar tensor. ``max_per_param`` limits the number of scalar
    entries probed per parameter (chosen with ``rng``); ``None`` probes all.
    """
    zero_grads(params)
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(ga.reshape(-1)[i], num)))
    return worst
