"""Residual bottleneck adapters and parameter freezing.

Both adapters project channels ``C -> hidden -> C`` with a zero-initialized
up-projection, so inserting them into a trained network leaves its outputs
unchanged until the adapters are updated.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import Linear, Module, param
from .tensor import Tensor

ADAPTER_PATTERNS = ("*t_ada.*", "*s_ada.*")


def bottleneck_width(dim: int, ratio: float) -> int:
    hidden = int(round(dim * ratio))
    if hidden < 1 or hidden >= dim:
        raise ConfigError(f"adapter bottleneck {hidden} must satisfy 1 <= hidden < {dim} (ratio {ratio})")
    return hidden


class TemporalAdapter(Module):
    """x + up(dwconv3d(down(x))) over a token grid ``(l, h, m)``."""

    def __init__(self, rng: np.random.Generator, dim: int, ratio: float = 0.25, kernel=(3, 1, 1)):
        hidden = bottleneck_width(dim, ratio)
        if any(k % 2 == 0 or k < 1 for k in kernel):
            raise ConfigError(f"temporal adapter kernel extents must be odd, got {tuple(kernel)}")
        self.down = Linear(rng, dim, hidden)
        fan = int(np.prod(kernel))
        bound = 1.0 / np.sqrt(fan)
        self.conv = param(rng.uniform(-bound, bound, size=tuple(kernel) + (hidden,)))
        self.conv_bias = param(np.zeros(hidden))
        self.up = Linear(rng, hidden, dim, zero=True)
        self._hidden = hidden

    def __call__(self, x: Tensor, grid: Sequence[int]) -> Tensor:
        l, h, m = grid
        lead = x.shape[:-2]
        z = self.down(x).reshape(lead + (l, h, m, self._hidden))
        z = T.depthwise_conv3d(z, self.conv) + self.conv_bias
        z = z.reshape(lead + (l * h * m, self._hidden))
        return x + self.up(z)


class SpatialAdapter(Module):
    """x + up(gelu(down(x)))."""

    def __init__(self, rng: np.random.Generator, dim: int, ratio: float = 0.25):
        hidden = bottleneck_width(dim, ratio)
        self.down = Linear(rng, dim, hidden)
        self.up = Linear(rng, hidden, dim, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.up(T.gelu(self.down(x)))


def t_ada(f: Tensor, adapter: TemporalAdapter, grid: Sequence[int]) -> Tensor:
    return adapter(f, grid)


def s_ada(f: Tensor, adapter: SpatialAdapter) -> Tensor:
    return adapter(f)


def adapter_param_count(dim: int, ratio: float, kernel=(3, 1, 1), temporal: bool = False) -> int:
    """Closed-form parameter count of one adapter (weights and biases)."""
    hidden = bottleneck_width(dim, ratio)
    n = 2 * dim * hidden + hidden + dim
    if temporal:
        n += int(np.prod(kernel)) * hidden + hidden
    return n


@dataclass
class FreezePlan:
    """Glob patterns over parameter names.

    A parameter is frozen when it matches ``freeze`` and none of ``unfreeze``.
    """

    freeze: list[str] = field(default_factory=list)
    unfreeze: list[str] = field(default_factory=list)

    @classmethod
    def adapters_only(cls) -> "FreezePlan":
        return cls(freeze=["*"], unfreeze=list(ADAPTER_PATTERNS))

    @classmethod
    def backbone(cls) -> "FreezePlan":
        """Freeze the shared trunk except its adapters."""
        return cls(freeze=["trunk.*"], unfreeze=list(ADAPTER_PATTERNS))

    def is_frozen(self, name: str) -> bool:
        hit = any(fnmatch.fnmatchcase(name, p) for p in self.freeze)
        return hit and not any(fnmatch.fnmatchcase(name, p) for p in self.unfreeze)

    def validate(self, names: Sequence[str]) -> None:
        # unfreeze entries are exceptions and may legitimately match nothing
        for pat in self.freeze:
            if not any(fnmatch.fnmatchcase(n, pat) for n in names):
                raise ConfigError(f"freeze pattern {pat!r} matches no parameter")


def apply_freeze(model: Module, plan: FreezePlan) -> Module:
    names = [n for n, _ in model.named_parameters()]
    plan.validate(names)
    for name, p in model.named_parameters():
        p.requires_grad = not plan.is_frozen(name)
        if not p.requires_grad:
            p.grad = None
    return model


def count_params(model: Module, plan: FreezePlan | None = None) -> tuple[int, int, float]:
    """(total, tunable, tunable / total)."""
    total = tunable = 0
    for name, p in model.named_parameters():
        total += p.size
        frozen = plan.is_frozen(name) if plan is not None else not p.requires_grad
        if not frozen:
            tunable += p.size
    return total, tunable, (tunable / total if total else 0.0)
