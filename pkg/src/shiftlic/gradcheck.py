"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Parameter, Tape, Tensor


def _projection(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
                      seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` is reduced to a scalar through a fixed random projection of its
    output. The error is ``max |analytic - numeric| / (|numeric| + 1e-8)``.
    Run it in float64; float32 differences cannot resolve 1e-4.
    """
    x0 = np.array(x.data, dtype=np.float64)
    probe = fn(Tensor(x0))
    proj = _projection(probe.shape, seed)

    def scalar(arr) -> float:
        return float(np.sum(fn(Tensor(arr)).data * proj))

    with Tape() as tape:
        leaf = tape.watch(Tensor(x0))
        loss = ops.sum_(ops.mul(fn(leaf), Tensor(proj)))
    tape.backward(loss)
    analytic = tape.grad_of(leaf)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar(x0)
        flat[i] = orig - h
        down = scalar(x0)
        flat[i] = orig
        nflat[i] = (up - down) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def param_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                     h: float = 1e-4, max_coords: int | None = None,
                     seed: int = 0) -> float:
    """Relative error of parameter gradients of a scalar ``loss_fn()``.

    ``max_coords`` randomly subsamples coordinates per parameter for large graphs.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - num) / (abs(num) + 1e-8)
            worst = max(worst, err)
    return worst
