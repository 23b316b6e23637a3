"""Parameter containers and the small set of layers everything is built from."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-registered parameters, named by attribute path.

    Parameters are leaf Tensors with ``requires_grad=True``; child modules and
    lists of child modules are walked recursively in attribute order, so names
    and their order are deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                value = np.asarray(state[name], dtype=T.DTYPE)
                if value.shape != p.shape:
                    raise T.ShapeError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
                p.data = value.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.DTYPE), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, n_in, (n_in, n_out))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def _resolve(module: Module, name: str):
    *path, leaf = name.split(".")
    obj = module
    for part in path:
        obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
    return obj, leaf


@contextmanager
def substituted(module: Module, tensors: dict[str, Tensor]):
    """Temporarily swap named parameters for the given Tensors (for gradient checks)."""
    saved = {}
    try:
        for name, t in tensors.items():
            owner, leaf = _resolve(module, name)
            saved[name] = getattr(owner, leaf)
            setattr(owner, leaf, t)
        yield module
    finally:
        for name, t in saved.items():
            owner, leaf = _resolve(module, name)
            setattr(owner, leaf, t)
