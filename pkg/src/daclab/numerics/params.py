from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParameterSet(Mapping):
    """Named trainable tensors. Iteration order is lexicographic by name."""

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for name, t in (items or {}).items():
            self[name] = t

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        tensor.requires_grad = True
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"ParameterSet({', '.join(f'{k}{tuple(self[k].shape)}' for k in self)})"

    def numel(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def copy(self) -> ParameterSet:
        """Deep copy of values; gradients are not carried over."""
        return ParameterSet({k: Tensor(self[k].data.copy(), dtype=self[k].dtype) for k in self})

    def prefixed(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}{k}": self[k] for k in self}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self[k].data for k in self}

    def equal(self, other: ParameterSet) -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[k].dtype == other[k].dtype and np.array_equal(self[k].data, other[k].data)
            for k in self
        )

    @staticmethod
    def merge(*groups: Mapping[str, Tensor]) -> ParameterSet:
        out = ParameterSet()
        for g in groups:
            for k, t in g.items():
                out[k] = t
        return out
