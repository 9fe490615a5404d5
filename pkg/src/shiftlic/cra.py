"""Channel recursive attention (CRA)."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from . import ops
from .nn import Conv1x1, DepthwiseConv3x3, Module
from .shift import ShiftSpec, SpatialShiftBlock, channel_shuffle
from .tensor import ShapeError, Tensor


class ChannelRecursiveAttention(Module):
    """Grouped pyramid of depthwise convs fused recursively into a gate.

    ``n_groups`` channel groups are processed at scales 1, 1/2, 1/4, ...; the
    fusion convs keep their concatenated width, so the widths grow
    2N/n, 3N/n, ..., N. ``fuse_shuffle`` and ``use_local`` disable the channel
    shuffle inside fusion and the trailing shuffle + SSB branch.
    """

    def __init__(self, channels: int, rng: np.random.Generator, n_groups: int = 4,
                 shuffle_groups: int = 8, spec: ShiftSpec | None = None,
                 use_local: bool = True, fuse_shuffle: bool = True,
                 ssb_kwargs: dict | None = None):
        if channels % n_groups:
            raise ShapeError(f"CRA: {channels} channels not divisible by {n_groups} groups")
        self.channels = channels
        self.n_groups = n_groups
        self.shuffle_groups = shuffle_groups
        self.fuse_shuffle = fuse_shuffle
        k = channels // n_groups
        for i in range(2, n_groups + 1):
            if (i * k) % shuffle_groups:
                raise ShapeError(f"CRA: fusion width {i * k} not divisible by {shuffle_groups}")
        self.entry = Conv1x1(channels, channels, rng)
        self.dw = [DepthwiseConv3x3(k, rng) for _ in range(n_groups)]
        self.fsf = [Conv1x1(i * k, i * k, rng) for i in range(2, n_groups + 1)]
        self.local = (SpatialShiftBlock(channels, channels, spec or ShiftSpec(), rng, **(ssb_kwargs or {}))
                      if use_local else None)

    def forward(self, x: Tensor) -> Tensor:
        return cra_forward(x, self)


def fsf(a: Tensor, b: Tensor, conv: Conv1x1, shuffle_groups: int, shuffle: bool = True) -> Tensor:
    """Feature shuffle fusion: 1x1 conv of the channel-shuffled concatenation."""
    cat = ops.channel_concat([a, b])
    if shuffle:
        cat = channel_shuffle(cat, shuffle_groups)
    return conv(cat)


def pyramid_cap(H: int, W: int, n_groups: int) -> int:
    """Deepest pooling factor used for an ``H`` x ``W`` map.

    Normally ``2**(n_groups-1)``. Maps smaller than that (a 64x64 input
    reaches 4x4 at the last stage) stop at the largest power of two that fits,
    so the deepest levels collapse to one pixel instead of failing.
    """
    f = 2 ** (n_groups - 1)
    fit = 1 << (min(H, W).bit_length() - 1)
    f = min(f, fit)
    if H % f or W % f:
        raise ShapeError(f"CRA: {H}x{W} not divisible by pyramid factor {f}")
    return f


def cra_attention(x: Tensor, p: ChannelRecursiveAttention) -> Tensor:
    """Gated residual ``GELU(Y) * x + x`` before the local branch."""
    n = p.n_groups
    _, C, H, W = x.shape
    if C != p.channels:
        raise ShapeError(f"CRA: {C} channels, module expects {p.channels}")
    cap = pyramid_cap(H, W, n)
    parts = ops.channel_split(p.entry(x), n)
    feats = []
    for i, (part, dw) in enumerate(zip(parts, p.dw)):
        s = min(2 ** i, cap)
        h = ops.resample(part, s, "down") if s > 1 else part
        h = dw(h)
        feats.append(ops.resample(h, s, "up") if s > 1 else h)
    y = feats[0]
    for conv, nxt in zip(p.fsf, feats[1:]):
        y = fsf(y, nxt, conv, p.shuffle_groups, p.fuse_shuffle)
    return ops.add(ops.mul(ops.gelu(y), x), x)


def cra_forward(x: Tensor, p: ChannelRecursiveAttention) -> Tensor:
    out = cra_attention(x, p)
    if p.local is not None:
        out = p.local(channel_shuffle(out, p.shuffle_groups))
    return out


def cra_param_count(N: int) -> Fraction:
    return 9 * Fraction(N) + Fraction(39, 8) * N * N


def cra_flops(N: int, H: int, W: int) -> Fraction:
    return H * W * (Fraction(765, 256) * N + (7 + Fraction(13, 16)) * N * N)


def cra_constructed_weight_count(N: int, n_groups: int = 4, use_local: bool = True) -> Fraction:
    """Bias-free weights of :class:`ChannelRecursiveAttention` as built here."""
    k = Fraction(N, n_groups)
    fsf_w = sum((i * k) ** 2 for i in range(2, n_groups + 1))
    local = 2 * N * N if use_local else 0
    return N * N + 9 * N + fsf_w + local
