"""Parameter containers and the small layer set the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


class Parameter(Tensor):
    """A trainable leaf. Freezing flips ``requires_grad`` but keeps it a parameter."""


def param(data: np.ndarray) -> Parameter:
    return Parameter(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return param(np.clip(rng.standard_normal(shape), -2.0, 2.0) * std)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


class Module:
    """Walks attributes to find parameters, much like ``torch.nn.Module``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise ConfigError(f"shape mismatch for {k}: {p.shape} vs {state[k].shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        self.weight = param(np.zeros((d_in, d_out))) if zero else xavier(rng, d_in, d_out)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self._eps)


class Mlp(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
