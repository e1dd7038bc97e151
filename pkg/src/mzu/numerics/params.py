"""Named trainable parameters with per-parameter optimizer slots."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import TRAIN_DTYPE, Tensor


class AdamSlots:
    """First/second moment buffers plus a step counter for one parameter."""

    __slots__ = ("m", "v", "step")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.step = 0


class ParamStore:
    """Ordered map from parameter path (e.g. ``"cell/d0/gate/zone_proj"``)
    to its Tensor, with matching Adam slots.

    Shapes are fixed at registration; the optimizer mutates buffers in
    place between steps, while forward passes only read them.
    """

    def __init__(self, dtype=TRAIN_DTYPE):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._slots: dict[str, AdamSlots] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"parameter {name!r} already registered")
        arr = np.ascontiguousarray(values, dtype=self.dtype)
        tensor = Tensor(arr, requires=True)
        self._tensors[name] = tensor
        self._slots[name] = AdamSlots(arr.shape, self.dtype)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def slots(self, name: str) -> AdamSlots:
        return self._slots[name]

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def set_values(self, name: str, values: np.ndarray) -> None:
        """Overwrite a parameter buffer in place (shape must match)."""
        target = self._tensors[name].data
        values = np.asarray(values, dtype=self.dtype)
        if values.shape != target.shape:
            raise ShapeError(
                f"set_values: {name} has shape {target.shape}, got {values.shape}")
        target[...] = values

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another precision (moments reset)."""
        other = ParamStore(dtype=dtype)
        for name, tensor in self._tensors.items():
            other.add(name, tensor.data.astype(dtype))
        return other

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t.data) for name, t in self._tensors.items()}


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int = None,
                   fan_out: int = None) -> np.ndarray:
    """Uniform(+-sqrt(6/(fan_in+fan_out))); fans default to the last two dims."""
    if fan_in is None:
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
    if fan_out is None:
        fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def embedding_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)
