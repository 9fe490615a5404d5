"""Minimal layer containers built on the primitives in :mod:`shiftlic.ops`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, note_input, scope


class Module:
    """Base class: parameters and child modules are discovered from attributes.

    Attribute order is definition order, which fixes the parameter order used by
    checkpoints and by the optimizer.
    """

    name: str = ""

    def __call__(self, x, *args, **kwargs):
        with scope(self.name):
            note_input(getattr(x, "shape", ()))
            return self.forward(x, *args, **kwargs)

    def forward(self, x, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{key}{i}", item
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def weight_count(self) -> int:
        """Number of learned weights excluding biases."""
        return sum(p.size for n, p in self.named_parameters()
                   if not n.rsplit(".", 1)[-1].startswith("bias"))

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def assign_names(self, prefix: str = "") -> None:
        """Set ``name`` on every submodule and parameter to its dotted path."""
        for key, child in self.children():
            child.name = key
            child.assign_names(f"{prefix}{key}.")
        for key, p in self.named_parameters(prefix):
            p.name = key


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.cin, self.cout = cin, cout
        bound = 1.0 / np.sqrt(cin)
        self.weight = Parameter(_uniform(rng, bound, (cout, cin)))
        self.bias = Parameter(_uniform(rng, bound, (cout,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)


class DepthwiseConv3x3(Module):
    def __init__(self, channels: int, rng: np.random.Generator, bias: bool = True):
        self.channels = channels
        bound = 1.0 / 3.0
        self.weight = Parameter(_uniform(rng, bound, (channels, 3, 3)))
        self.bias = Parameter(_uniform(rng, bound, (channels,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv3x3(x, self.weight, self.bias)


class Sequential(Module):
    """Chain of layers; ``names`` gives the children readable path segments."""

    def __init__(self, *layers: Module, names=None):
        self.layers = list(layers)
        self.names = list(names) if names is not None else [f"layers{i}" for i in range(len(layers))]
        if len(self.names) != len(self.layers):
            raise ValueError("one name per layer")

    def children(self):
        yield from zip(self.names, self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class PixelRearrange(Module):
    def __init__(self, r: int, direction: str):
        self.r, self.direction = r, direction

    def forward(self, x):
        return ops.pixel_rearrange(x, self.r, self.direction)
