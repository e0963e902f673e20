"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import HCTError
from .layers import Parameter


def cosine_warmup_lr(step: int, total: int, warmup: int, base: float) -> float:
    """Linear ramp 0 -> base over ``warmup`` steps, then half-cosine base -> 0 at ``total``."""
    if step < warmup:
        return base * step / warmup
    if total <= warmup:
        return base
    progress = min(1.0, (step - warmup) / (total - warmup))
    return 0.5 * base * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params: Sequence[tuple[str, Parameter]], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05, no_decay: Sequence[str] = ("bias", "norm", "pos")):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        # biases, norm scales and positional tables are conventionally not decayed
        self._decay = {n: not any(tag in n for tag in no_decay) for n, _ in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise HCTError(f"internal error: gradient shape {g.shape} != parameter {name} {p.data.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self._decay[name] and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for n in self.m:
            self.m[n] = np.array(state[f"m.{n}"])
            self.v[n] = np.array(state[f"v.{n}"])
        self.step_count = int(step_count)


def adamw_step(opt: AdamW, lr_t: float) -> None:
    opt.step(lr_t)
