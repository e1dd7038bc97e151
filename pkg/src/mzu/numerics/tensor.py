"""Dense tensors and the gradient tape.

A Tensor wraps a row-major NumPy array and is treated as an immutable
value once created (the optimizer mutates parameter buffers in place,
but only between training steps, never while a tape is alive).

While a Tape is active (see `recording`), every primitive whose output
depends on a trainable tensor appends one record. Records are created
in evaluation order, so the tape is topologically sorted by
construction and a reverse sweep can walk it once, newest to oldest.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

TRAIN_DTYPE = np.float32   # training-grade precision
CHECK_DTYPE = np.float64   # checking-grade precision (gradient checks)


class Tensor:
    """Dense real array with a trainability flag.

    `requires` marks tensors whose gradient is wanted (parameters) or
    that depend on one; gradient-free constants keep the flag off so
    their subgraphs are never recorded.
    """

    __slots__ = ("data", "requires")

    def __init__(self, data: np.ndarray, requires: bool = False):
        self.data = data
        self.requires = requires

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires={self.requires})"

    # Convenience arithmetic; delegates to the primitive registry so
    # recording semantics stay in one place.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.matmul(self, other)


def constant(values, dtype=None) -> Tensor:
    """Wrap raw values as a gradient-free Tensor."""
    arr = np.asarray(values, dtype=dtype if dtype is not None else TRAIN_DTYPE)
    return Tensor(arr, requires=False)


def zeros(shape, dtype=TRAIN_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires=False)


def ones(shape, dtype=TRAIN_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires=False)


class TapeRecord:
    """One primitive application: op id, operands, result, derivative rule.

    `backward` maps the gradient at `output` to a tuple of gradients
    aligned with `inputs` (None for operands that need none). Holding
    the Tensor objects themselves keeps their ids unique for the life
    of the tape.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of primitive applications for one training step."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[TapeRecord] = []

    def append(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.records.append(TapeRecord(op, inputs, output, backward))

    def __len__(self) -> int:
        return len(self.records)


_active: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _active


@contextlib.contextmanager
def recording(tape: Tape):
    """Make `tape` the recording target for primitives in this block.

    Tapes are owned by a single training step; nesting replaces the
    active tape for the inner block only.
    """
    global _active
    previous = _active
    _active = tape
    try:
        yield tape
    finally:
        _active = previous
