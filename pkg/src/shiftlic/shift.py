"""Spatial shift, channel shuffle and the spatial shift block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Conv1x1, Module
from .tensor import ShapeError, Tensor, apply

# unit offsets, diagonals first; (vertical, horizontal)
_DIAGONALS = [(-1, -1), (-1, 1), (1, -1), (1, 1)]
_AXIAL = [(-1, 0), (0, -1), (0, 1), (1, 0)]


def default_offsets(groups: int) -> list[tuple[int, int]]:
    """Offsets for ``groups`` shift groups.

    Four groups give the four diagonals. Two groups use one opposite diagonal
    pair, eight add the axial neighbours, and larger counts repeat the eight
    directions at growing distance.
    """
    if groups == 1:
        return [(0, 0)]
    if groups == 2:
        return [(-1, -1), (1, 1)]
    out = []
    ring = 1
    while len(out) < groups:
        out.extend((ring * a, ring * b) for a, b in _DIAGONALS + _AXIAL)
        ring += 1
    return out[:groups]


@dataclass
class ShiftSpec:
    groups: int = 4
    offsets: list = field(default_factory=lambda: list(_DIAGONALS))
    step: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.step < 1:
            raise ValueError("groups and step must be positive")
        self.offsets = [tuple(int(v) for v in o) for o in self.offsets]
        if len(self.offsets) != self.groups:
            raise ValueError(f"{self.groups} groups need {self.groups} offsets, got {len(self.offsets)}")

    @classmethod
    def with_groups(cls, groups: int, step: int = 1) -> "ShiftSpec":
        return cls(groups=groups, offsets=default_offsets(groups), step=step)

    def to_dict(self) -> dict:
        return {"groups": self.groups, "offsets": [list(o) for o in self.offsets], "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(groups=d["groups"], offsets=[tuple(o) for o in d["offsets"]], step=d["step"])


def _shift_plane(a: np.ndarray, dv: int, dh: int) -> np.ndarray:
    """out[..., i, j] = a[..., i + dv, j + dh], zero outside."""
    H, W = a.shape[-2:]
    out = np.zeros_like(a)
    if abs(dv) >= H or abs(dh) >= W:
        return out
    out[..., max(0, -dv):H - max(0, dv), max(0, -dh):W - max(0, dh)] = \
        a[..., max(0, dv):H - max(0, -dv), max(0, dh):W - max(0, -dh)]
    return out


def spatial_shift(x: Tensor, spec: ShiftSpec, strict: bool = True) -> Tensor:
    """Grouped zero-filled translation; channel group g reads from offset ``offsets[g] * step``.

    With ``strict`` an offset reaching past the whole map is an error;
    otherwise that group is simply zeroed.
    """
    ops._check4(x, "spatial_shift")
    B, C, H, W = x.shape
    if C % spec.groups:
        raise ShapeError(f"spatial_shift: {C} channels not divisible by {spec.groups} groups")
    k = C // spec.groups
    offs = [(a * spec.step, b * spec.step) for a, b in spec.offsets]
    for dv, dh in offs if strict else ():
        if abs(dv) >= H or abs(dh) >= W:
            raise ShapeError(f"spatial_shift: offset ({dv},{dh}) too large for {H}x{W}")
    out = np.empty_like(x.data)
    for g, (dv, dh) in enumerate(offs):
        out[:, g * k:(g + 1) * k] = _shift_plane(x.data[:, g * k:(g + 1) * k], dv, dh)

    def vjp(gr):
        gx = np.empty_like(gr)
        for g, (dv, dh) in enumerate(offs):
            gx[:, g * k:(g + 1) * k] = _shift_plane(gr[:, g * k:(g + 1) * k], -dv, -dh)
        return (gx,)

    return apply("spatial_shift", out, (x,), vjp)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    if groups < 1 or channels % groups:
        raise ShapeError(f"channel_shuffle: {channels} channels not divisible by {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    ops._check4(x, "channel_shuffle")
    return ops.permute_channels(x, shuffle_permutation(x.shape[1], groups))


class SpatialShiftBlock(Module):
    """Residual 1x1 conv -> GELU -> spatial shift -> 1x1 conv.

    The hidden width equals the output width. A 1x1 shortcut conv exists only
    when input and output widths differ. ``use_shift`` and ``use_conv2`` switch
    off the shift and the trailing 1x1 conv for ablations.
    """

    def __init__(self, cin: int, cout: int, spec: ShiftSpec, rng: np.random.Generator,
                 use_shift: bool = True, use_conv2: bool = True, activation: str = "gelu"):
        self.cin, self.cout = cin, cout
        self.spec = spec
        self.use_shift = use_shift
        self.activation = activation
        self.conv1 = Conv1x1(cin, cout, rng)
        self.conv2 = Conv1x1(cout, cout, rng) if use_conv2 else None
        self.shortcut = Conv1x1(cin, cout, rng) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        return ssb_forward(x, self)


def ssb_forward(x: Tensor, p: SpatialShiftBlock) -> Tensor:
    if x.shape[1] != p.cin:
        raise ShapeError(f"ssb_forward: {x.shape[1]} input channels, block expects {p.cin}")
    h = p.conv1(x)
    if p.activation == "gelu":
        h = ops.gelu(h)
    elif p.activation != "none":
        raise ValueError(f"unknown activation {p.activation!r}")
    if p.use_shift:
        # the coarsest hyper maps of a 64x64 input are 1x1
        h = spatial_shift(h, p.spec, strict=False)
    if p.conv2 is not None:
        h = p.conv2(h)
    skip = p.shortcut(x) if p.shortcut is not None else x
    return ops.add(h, skip)


def ssb_param_count(M: int, N: int) -> int:
    """Bias-free weights of a block mapping M input to N output channels."""
    return N * N + M * N if M == N else N * N + 2 * M * N


def ssb_flops(M: int, N: int, H: int, W: int) -> int:
    """Weight multiplies of one forward pass over an H x W map."""
    return H * W * ssb_param_count(M, N)
