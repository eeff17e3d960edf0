"""Parameter containers and the standard transformer sub-layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layernorm, linear, mac_tag


class Module:
    """Minimal parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float | None = None):
        std = np.sqrt(1.0 / d_in) if std is None else std
        self.weight = param(rng.normal(0.0, std, (d_in, d_out)))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gain = param(np.ones(c))
        self.bias = param(np.zeros(c))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Pre-norm residual feed-forward sub-layer ``x + fc2(gelu(fc1(norm(x))))``."""

    def __init__(self, c: int, ratio: float, rng: np.random.Generator):
        hidden = max(1, int(round(c * ratio)))
        self.norm = LayerNorm(c)
        self.fc1 = Linear(c, hidden, rng)
        self.fc2 = Linear(hidden, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        with mac_tag(kind="mlp"):
            return x + self.fc2(gelu(self.fc1(self.norm(x))))
