"""Differentiable primitives.

Every function takes :class:`~shiftlic.tensor.Tensor` (or Parameter) operands,
computes its result in the operands' floating dtype and registers a
vector-Jacobian product with the active tape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .tensor import Tensor, ShapeError, apply, as_tensor, add_macs

SQRT2 = math.sqrt(2.0)
INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (B,C,H,W) tensor, got shape {x.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# convolutions


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution: ``out[n,o,i,j] = b[o] + sum_c w[o,c] x[n,c,i,j]``."""
    _check4(x, "conv1x1")
    w = as_tensor(w, x)
    B, C, H, W = x.shape
    if w.data.ndim != 2 or w.shape[1] != C:
        raise ShapeError(f"conv1x1: weight {w.shape} does not match {C} input channels")
    O = w.shape[0]
    if b is not None:
        b = as_tensor(b, x)
        if b.shape != (O,):
            raise ShapeError(f"conv1x1: bias {b.shape} does not match {O} output channels")
    xf = x.data.reshape(B, C, H * W)
    wd = w.data.astype(x.dtype, copy=False)
    out = np.matmul(wd, xf)
    if b is not None:
        out += b.data.astype(x.dtype, copy=False)[None, :, None]
    out = out.reshape(B, O, H, W)
    add_macs(B * H * W * O * C)

    def vjp(g):
        gf = g.reshape(B, O, H * W)
        gx = np.matmul(wd.T, gf).reshape(B, C, H, W)
        gw = np.einsum("bop,bcp->oc", gf, xf, optimize=True)
        gb = gf.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return apply("conv1x1", out, inputs, vjp)


def depthwise_conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 correlation, stride 1, zero padding 1."""
    _check4(x, "depthwise_conv3x3")
    w = as_tensor(w, x)
    B, C, H, W = x.shape
    if w.shape != (C, 3, 3):
        raise ShapeError(f"depthwise_conv3x3: weight {w.shape} != ({C}, 3, 3)")
    if b is not None:
        b = as_tensor(b, x)
        if b.shape != (C,):
            raise ShapeError(f"depthwise_conv3x3: bias {b.shape} != ({C},)")
    wd = w.data.astype(x.dtype, copy=False)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x.data)
    for di in range(3):
        for dj in range(3):
            out += wd[None, :, di, dj, None, None] * xp[:, :, di:di + H, dj:dj + W]
    if b is not None:
        out += b.data.astype(x.dtype, copy=False)[None, :, None, None]
    add_macs(B * C * H * W * 9)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + H, dj:dj + W] += wd[None, :, di, dj, None, None] * g
                gw[:, di, dj] = np.einsum("bchw,bchw->c", g, xp[:, :, di:di + H, dj:dj + W])
        gx = gxp[:, :, 1:H + 1, 1:W + 1]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return apply("depthwise_conv3x3", out, inputs, vjp)


def blur_valid(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Separable per-channel correlation with a fixed 1-D kernel, 'valid' borders."""
    _check4(x, "blur_valid")
    k = np.asarray(kernel, dtype=x.dtype)
    n = k.size
    B, C, H, W = x.shape
    if H < n or W < n:
        raise ShapeError(f"blur_valid: {H}x{W} smaller than window {n}")
    Ho, Wo = H - n + 1, W - n + 1
    tmp = np.zeros((B, C, Ho, W), dtype=x.dtype)
    for i in range(n):
        tmp += k[i] * x.data[:, :, i:i + Ho, :]
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for j in range(n):
        out += k[j] * tmp[:, :, :, j:j + Wo]

    def vjp(g):
        gt = np.zeros_like(tmp)
        for j in range(n):
            gt[:, :, :, j:j + Wo] += k[j] * g
        gx = np.zeros_like(x.data)
        for i in range(n):
            gx[:, :, i:i + Ho, :] += k[i] * gt
        return (gx,)

    return apply("blur_valid", out, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial rearrangement


def resample(x: Tensor, factor: int, direction: str) -> Tensor:
    """Mean-pool (``down``) or nearest-neighbour replicate (``up``) by ``factor``."""
    _check4(x, "resample")
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"resample factor must be a power of two, got {factor}")
    B, C, H, W = x.shape
    f = factor
    if direction == "down":
        if H % f or W % f:
            raise ShapeError(f"resample: {H}x{W} not divisible by {f}")
        out = x.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))

        def vjp(g):
            gx = np.repeat(np.repeat(g / (f * f), f, axis=2), f, axis=3)
            return (gx,)

    elif direction == "up":
        out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

        def vjp(g):
            return (g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)),)

    else:
        raise ValueError(f"unknown resample direction {direction!r}")
    return apply("resample", out, (x,), vjp)


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window."""
    _check4(x, "crop")
    B, C, H, W = x.shape
    if not (0 < height <= H and 0 < width <= W):
        raise ShapeError(f"crop: {height}x{width} does not fit in {H}x{W}")
    out = x.data[:, :, :height, :width].copy()

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :height, :width] = g
        return (gx,)

    return apply("crop", out, (x,), vjp)


def _s2c(a: np.ndarray, r: int) -> np.ndarray:
    B, C, H, W = a.shape
    a = a.reshape(B, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a).reshape(B, C * r * r, H // r, W // r)


def _c2s(a: np.ndarray, r: int) -> np.ndarray:
    B, C, H, W = a.shape
    a = a.reshape(B, C // (r * r), r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a).reshape(B, C // (r * r), H * r, W * r)


def pixel_rearrange(x: Tensor, r: int, direction: str) -> Tensor:
    """Lossless space/channel rearrangement.

    ``space_to_channel`` maps (B,C,H,W) to (B,C*r*r,H/r,W/r); each r x r
    window is written into consecutive channels in raster order.
    ``channel_to_space`` is the exact inverse.
    """
    _check4(x, "pixel_rearrange")
    B, C, H, W = x.shape
    if direction == "space_to_channel":
        if H % r or W % r:
            raise ShapeError(f"space_to_channel: {H}x{W} not divisible by {r}")
        fwd, bwd = _s2c, _c2s
    elif direction == "channel_to_space":
        if C % (r * r):
            raise ShapeError(f"channel_to_space: {C} channels not divisible by {r * r}")
        fwd, bwd = _c2s, _s2c
    else:
        raise ValueError(f"unknown rearrange direction {direction!r}")
    out = fwd(x.data, r)
    return apply("pixel_rearrange", out, (x,), lambda g: (bwd(g, r),))


def channel_concat(xs) -> Tensor:
    xs = list(xs)
    for t in xs:
        _check4(t, "channel_concat")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"channel_concat: {t.shape} incompatible with {ref}")
    widths = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)
    cuts = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=1))

    return apply("channel_concat", out, xs, vjp)


def channel_split(x: Tensor, n: int) -> list[Tensor]:
    _check4(x, "channel_split")
    C = x.shape[1]
    if n < 1 or C % n:
        raise ShapeError(f"channel_split: {C} channels not divisible into {n} groups")
    k = C // n
    return [channel_slice(x, i * k, (i + 1) * k) for i in range(n)]


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "channel_slice")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return apply("channel_slice", out, (x,), vjp)


def permute_channels(x: Tensor, perm) -> Tensor:
    _check4(x, "permute_channels")
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    out = x.data[:, perm]
    return apply("permute_channels", out, (x,), lambda g: (g[:, inv],))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return apply("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return apply("transpose", out, (x,), lambda g: (g.transpose(inv),))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the leading axis."""
    a = as_tensor(a)
    b = as_tensor(b)
    ad = a.data.astype(b.dtype, copy=False)
    out = np.matmul(ad, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply("bmm", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise


def _binary(x, y):
    if not isinstance(x, Tensor) and not isinstance(y, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = x if isinstance(x, Tensor) else y
    x, y = as_tensor(x, like), as_tensor(y, like)
    dtype = np.result_type(x.dtype, y.dtype)
    return x, y, x.data.astype(dtype, copy=False), y.data.astype(dtype, copy=False)


def add(x, y) -> Tensor:
    x, y, a, b = _binary(x, y)
    out = a + b
    return apply("add", out, (x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x, y) -> Tensor:
    x, y, a, b = _binary(x, y)
    out = a - b
    return apply("sub", out, (x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(x, y) -> Tensor:
    x, y, a, b = _binary(x, y)
    out = a * b
    return apply("mul", out, (x, y), lambda g: (_unbroadcast(g * b, x.shape), _unbroadcast(g * a, y.shape)))


def div(x, y) -> Tensor:
    x, y, a, b = _binary(x, y)
    out = a / b
    return apply("div", out, (x, y),
                 lambda g: (_unbroadcast(g / b, x.shape), _unbroadcast(-g * a / (b * b), y.shape)))


def ew(x: Tensor, y: Tensor, kind: str) -> Tensor:
    """Elementwise ``add`` or ``mul`` of two equally shaped tensors."""
    if x.shape != y.shape:
        raise ShapeError(f"ew: shapes differ {x.shape} vs {y.shape}")
    if kind == "add":
        return add(x, y)
    if kind == "mul":
        return mul(x, y)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.dtype.type(c)
    return apply("scale", out, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    out = x.data * x.data
    return apply("square", out, (x,), lambda g: (2.0 * x.data * g,))


def power(x: Tensor, p: float) -> Tensor:
    """``x ** p`` for x > 0 (x == 0 allowed when p >= 1)."""
    out = np.power(x.data, p)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, p - 1.0)
        return (np.where(x.data > 0, g * d, 0.0).astype(x.dtype),)

    return apply("power", out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return apply("relu", out, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + special.erf(x.data / SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def vjp(g):
        pdf = INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return apply("gelu", out, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype)
    sig = special.expit(x.data)
    return apply("softplus", out, (x,), lambda g: (g * sig,))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data).astype(x.dtype)
    return apply("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return apply("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return apply("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return apply("log", out, (x,), lambda g: (g / x.data,))


def lower_bound(x: Tensor, bound: float) -> Tensor:
    """``max(x, bound)``; gradient is zero where the floor is active."""
    mask = x.data >= bound
    out = np.where(mask, x.data, bound).astype(x.dtype)
    return apply("lower_bound", out, (x,), lambda g: (g * mask,))


def gaussian_interval_mass(v: Tensor, sigma: Tensor) -> Tensor:
    """Probability mass of ``[v - 0.5, v + 0.5]`` under N(0, sigma^2).

    Evaluated on ``|v|`` in the lower tail for accuracy far from the mean.
    """
    if v.shape != sigma.shape:
        raise ShapeError(f"gaussian_interval_mass: {v.shape} vs {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian_interval_mass: sigma must be positive")
    s = sigma.data
    a = np.abs(v.data)
    hi = (0.5 - a) / s
    lo = (-0.5 - a) / s
    out = (special.ndtr(hi) - special.ndtr(lo)).astype(v.dtype)

    def vjp(g):
        phi_hi = INV_SQRT2PI * np.exp(-0.5 * hi * hi)
        phi_lo = INV_SQRT2PI * np.exp(-0.5 * lo * lo)
        d_da = (-phi_hi + phi_lo) / s
        gv = g * d_da * np.sign(v.data)
        gs = g * (-(phi_hi * hi) + phi_lo * lo) / s
        return gv, gs

    return apply("gaussian_interval_mass", out, (v, sigma), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return apply("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)
