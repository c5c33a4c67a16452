"""Parameter containers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    """Base class whose learnable tensors are discovered from attributes.

    Attributes holding a :class:`Tensor` with ``requires_grad`` set, another
    :class:`Module`, or a list/tuple of modules are walked in definition order.
    Tensors with ``requires_grad`` unset are buffers: saved but never trained.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            else:
                yield name, value

    def named_tensors(self, prefix: str = "", buffers: bool = True) -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad or buffers:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".", buffers)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return self.named_tensors(prefix, buffers=False)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing tensors in state: {sorted(missing)[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()


def param(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype, name=name)


def buffer(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, dtype=data.dtype, name=name)
