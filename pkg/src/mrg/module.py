from __future__ import annotations

from collections import defaultdict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class Init:
    """Parameter factory: Gaussian weights, constant biases, one dtype."""

    def __init__(self, rng: np.random.Generator, std: float = 0.1, dtype=np.float32):
        self.rng = rng
        self.std = std
        self.dtype = dtype

    def normal(self, *shape: int) -> Tensor:
        data = self.rng.normal(0.0, self.std, size=shape).astype(self.dtype)
        return Tensor(data, requires_grad=True)

    def const(self, value: float, *shape: int) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


class Trace:
    """Collects intermediate arrays (attention rows, gates) by name."""

    def __init__(self):
        self.records: dict[str, list] = defaultdict(list)

    def add(self, name: str, value, mask=None) -> None:
        data = value.data if isinstance(value, Tensor) else value
        self.records[name].append((np.array(data), None if mask is None else np.array(mask)))

    def __getitem__(self, name: str) -> list:
        return self.records[name]

    def __contains__(self, name: str) -> bool:
        return name in self.records
