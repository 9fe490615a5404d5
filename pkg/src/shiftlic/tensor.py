"""Dense tensors, learnable parameters and a reverse-mode gradient tape.

Feature maps are rank-4 ``(batch, channels, height, width)`` arrays. Weights and
reduction results may have other ranks; only the feature-map primitives insist
on rank 4.

Recording is opt-in: primitives executed inside ``with Tape() as tape:`` are
appended to that tape whenever one of their inputs is a :class:`Parameter` or a
tensor already produced on the same tape. ``tape.backward(loss)`` then walks
the records in exact reverse order and accumulates into ``Parameter.grad``.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus an optional handle into the active tape."""

    __slots__ = ("data", "tape_id", "_tape")

    def __init__(self, data, tape_id: int | None = None, tape: "Tape | None" = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.tape_id = tape_id
        self._tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def tracked_on(self, tape: "Tape") -> bool:
        return self._tape is tape and self.tape_id is not None

    def __repr__(self) -> str:
        tag = f", tape_id={self.tape_id}" if self.tape_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; the real work lives in shiftlic.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


class Parameter(Tensor):
    """A learnable leaf. ``grad`` always has the value's shape."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, copy=True))
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    @value.setter
    def value(self, arr) -> None:
        arr = np.asarray(arr, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {arr.shape} to {self.data.shape}")
        self.data = arr
        if self.grad.dtype != arr.dtype:
            self.grad = np.zeros_like(arr)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class _Record:
    __slots__ = ("inputs", "out_id", "vjp", "name")

    def __init__(self, inputs, out_id, vjp, name):
        self.inputs = inputs
        self.out_id = out_id
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered log of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._next_id = 0
        self.consumed = False
        self._leaf_grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _tracked(self, t) -> bool:
        return isinstance(t, Parameter) or (isinstance(t, Tensor) and t.tracked_on(self))

    def watch(self, x: Tensor) -> Tensor:
        """Return a leaf copy of ``x`` whose gradient is kept after backward."""
        out = Tensor(x.data, self._next_id, self)
        self._next_id += 1
        self._leaf_grads[out.tape_id] = np.zeros_like(out.data)
        return out

    def grad_of(self, x: Tensor) -> np.ndarray:
        if x.tape_id not in self._leaf_grads:
            raise TapeError("tensor was not watched on this tape")
        return self._leaf_grads[x.tape_id]

    def record(self, name: str, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        t = Tensor(out, self._next_id, self)
        self._next_id += 1
        self._records.append(_Record(tuple(inputs), t.tape_id, vjp, name))
        return t

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.tracked_on(self):
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gi.astype(inp.grad.dtype, copy=False)
                elif isinstance(inp, Tensor) and inp.tracked_on(self):
                    if inp.tape_id in grads:
                        grads[inp.tape_id] = grads[inp.tape_id] + gi
                    else:
                        grads[inp.tape_id] = gi
        for tid, g in grads.items():
            if tid in self._leaf_grads:
                self._leaf_grads[tid] = self._leaf_grads[tid] + g
        self._records.clear()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every Parameter reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss is not attached to a tape")
    loss._tape.backward(loss)


def apply(name: str, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    """Wrap a primitive's result, recording it when any input is tracked.

    ``vjp(g)`` must return one gradient (or None) per entry of ``inputs``.
    """
    if out.dtype.kind == "f" and not np.all(np.isfinite(out)):
        if all(not isinstance(i, Tensor) or np.all(np.isfinite(i.data)) for i in inputs):
            raise NonFiniteError(f"{name} produced non-finite values from finite inputs")
    _count_other(name, out)
    tape = current_tape()
    if tape is not None and any(tape._tracked(i) for i in inputs):
        return tape.record(name, out, inputs, vjp)
    return Tensor(out)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# multiply counting


class MacCounter:
    """Per-scope tally of weight multiplies (MACs) and other multiplies."""

    def __init__(self):
        self.macs: dict[str, int] = defaultdict(int)
        self.other: dict[str, int] = defaultdict(int)
        self.shapes: dict[str, tuple] = {}
        self._scopes: list[str] = []

    @property
    def scope(self) -> str:
        return ".".join(s for s in self._scopes if s)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_other(self) -> int:
        return sum(self.other.values())


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


@contextmanager
def scope(name: str) -> Iterator[None]:
    counters = _counters()
    for c in counters:
        c._scopes.append(name)
    try:
        yield
    finally:
        for c in counters:
            c._scopes.pop()


def add_macs(n: int) -> None:
    for c in _counters():
        c.macs[c.scope] += int(n)


def note_input(shape: tuple) -> None:
    """Remember the first input shape seen in the current scope."""
    for c in _counters():
        c.shapes.setdefault(c.scope, tuple(shape))


# elementwise ops that multiply two data operands; reported separately
_OTHER_MULTIPLY_OPS = {"mul", "gelu", "div"}


def _count_other(name: str, out: np.ndarray) -> None:
    if name in _OTHER_MULTIPLY_OPS:
        for c in _counters():
            c.other[c.scope] += int(out.size)
