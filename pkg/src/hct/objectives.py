"""Task heads, supervised losses, the inter-task contrastive loss and the total objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, UsageError
from .hram import TaskId
from .layers import Linear, Module
from .tensor import Tensor

DEFAULT_TEMPERATURE = 0.07


@dataclass
class LossWeights:
    phase: float = 0.3
    step: float = 0.2
    instrument: float = 0.3
    action: float = 0.2

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if v < 0:
                raise ConfigError(f"loss weight for {k.value} must be >= 0, got {v}")

    def as_dict(self) -> dict[TaskId, float]:
        return {TaskId.PHASE: self.phase, TaskId.STEP: self.step,
                TaskId.INSTRUMENT: self.instrument, TaskId.ACTION: self.action}


@dataclass
class IclConfig:
    temperature: float = DEFAULT_TEMPERATURE
    pairs: list = field(default_factory=lambda: [["phase", "step"], ["instrument", "action"]])
    proj_dim: int | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"ICL temperature must be > 0, got {self.temperature}")

    def pair_ids(self) -> list[tuple[TaskId, TaskId]]:
        out = []
        for pair in self.pairs:
            if len(pair) != 2:
                raise ConfigError(f"ICL pair must name two tasks, got {pair}")
            a, b = TaskId.parse(pair[0]), TaskId.parse(pair[1])
            if a is b:
                raise ConfigError(f"ICL pair needs two distinct tasks, got {pair}")
            out.append((a, b))
        return out

    def tasks(self) -> list[TaskId]:
        seen: list[TaskId] = []
        for a, b in self.pair_ids():
            for t in (a, b):
                if t not in seen:
                    seen.append(t)
        return seen


def pair_name(a: TaskId, b: TaskId) -> str:
    return f"icl_{a.value}_{b.value}"


class HeadSet(Module):
    """Linear heads on pooled features; the action head also sees pooled instrument tokens."""

    def __init__(self, rng: np.random.Generator, channels: int, sizes: Mapping[str, int]):
        self.phase = Linear(rng, channels, sizes["phase"])
        self.step = Linear(rng, channels, sizes["step"])
        self.instrument = Linear(rng, channels, sizes["instrument"])
        self.action = Linear(rng, 2 * channels, sizes["action"])
        self._class_weights: dict[TaskId, np.ndarray] = {}

    def set_class_weights(self, weights: Mapping[TaskId, np.ndarray]) -> None:
        for task, w in weights.items():
            w = np.asarray(w, dtype=np.float64)
            head = getattr(self, TaskId.parse(task).value)
            if w.shape != (head.weight.shape[1],):
                raise ConfigError(f"class weights for {task} have shape {w.shape}, expected ({head.weight.shape[1]},)")
            if not (w > 0).all():
                raise ConfigError(f"class weights for {task} must be strictly positive")
            self._class_weights[TaskId.parse(task)] = w

    def class_weights(self, task: TaskId) -> np.ndarray | None:
        return self._class_weights.get(task)


def inverse_frequency_weights(counts: Sequence[float]) -> np.ndarray:
    """1 / count, normalized to mean 1; absent classes are treated as seen once."""
    c = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    w = 1.0 / c
    return w / w.mean()


def icl_embed(features: Tensor, proj: Linear, row_weights: np.ndarray | None = None) -> Tensor:
    """Pool over tokens, project, L2-normalize: ``[B, L, C]`` -> ``[B, P]``.

    ``row_weights`` ``[B, L]`` replaces the plain token mean, e.g. to pool
    only the rows that hold instrument boxes.
    """
    if row_weights is None:
        pooled = T.mean(features, axis=-2)
    else:
        pooled = T.tsum(features * np.asarray(row_weights, dtype=features.dtype)[..., None], axis=-2)
    return T.l2_normalize(proj(pooled))


def info_nce(f_a: Tensor, f_b: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """One direction: row ``b`` of ``f_a`` must pick row ``b`` of ``f_b``; summed over the batch."""
    if f_a.ndim != 2 or f_a.shape != f_b.shape:
        raise UsageError(f"ICL embeddings must be matching [B, P] arrays, got {f_a.shape} and {f_b.shape}")
    B = f_a.shape[0]
    if B < 2:
        raise UsageError(f"ICL needs a batch of at least 2 clips for negatives, got {B}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    sim = T.matmul(T.l2_normalize(f_a), T.swap_last(T.l2_normalize(f_b))) * (1.0 / temperature)
    return -T.tsum(T.getitem(T.log_softmax(sim), (np.arange(B), np.arange(B))))


def icl_pair_loss(f_ci: Tensor, f_cj: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Symmetric InfoNCE with in-batch negatives, summed over the batch.

    Row ``b`` of each embedding set is the positive for row ``b`` of the
    other; the remaining ``B - 1`` rows act as negatives.
    """
    return info_nce(f_ci, f_cj, temperature) + info_nce(f_cj, f_ci, temperature)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Class-weighted softmax CE, averaged with the weights as normalizer."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k}): {labels.tolist()}")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    wy = w[labels].astype(logits.dtype)
    picked = T.getitem(T.log_softmax(logits), (np.arange(n), labels))
    return -T.tsum(picked * wy) * (1.0 / wy.sum())


def weighted_bce(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Per-class weighted BCE, summed over classes, averaged over the batch."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise DataError(f"multi-hot targets {targets.shape} do not match logits {logits.shape}")
    if ((targets != 0) & (targets != 1)).any():
        raise DataError("multi-hot targets must be 0/1")
    per = T.bce_with_logits(logits, targets, weights)
    return T.tsum(per) * (1.0 / logits.shape[0])


@dataclass
class Labels:
    phase: np.ndarray
    step: np.ndarray
    action: np.ndarray
    instrument: np.ndarray
    clip_ids: np.ndarray | None = None


def supervised_losses(heads: HeadSet, logits: Mapping[TaskId, Tensor], labels: Labels) -> dict[TaskId, Tensor]:
    """Weighted CE for phase/step/instrument and weighted BCE for actions."""
    out: dict[TaskId, Tensor] = {}
    try:
        out[TaskId.PHASE] = weighted_cross_entropy(logits[TaskId.PHASE], labels.phase, heads.class_weights(TaskId.PHASE))
        out[TaskId.STEP] = weighted_cross_entropy(logits[TaskId.STEP], labels.step, heads.class_weights(TaskId.STEP))
        inst = logits[TaskId.INSTRUMENT]
        if inst.shape[0]:
            out[TaskId.INSTRUMENT] = weighted_cross_entropy(inst, labels.instrument,
                                                            heads.class_weights(TaskId.INSTRUMENT))
        else:
            out[TaskId.INSTRUMENT] = Tensor(np.zeros((), dtype=inst.dtype))
        out[TaskId.ACTION] = weighted_bce(logits[TaskId.ACTION], labels.action, heads.class_weights(TaskId.ACTION))
    except DataError as exc:
        ids = None if labels.clip_ids is None else np.asarray(labels.clip_ids).tolist()
        raise DataError(f"{exc} (clips {ids})") from exc
    return out


def total_loss(task_losses: Mapping[TaskId, Tensor], icl_losses: Mapping[str, Tensor],
               weights: LossWeights) -> Tensor:
    """``sum_i lambda_i L_i + sum_pairs L_cij``."""
    lam = weights.as_dict()
    terms = [loss * lam[task] for task, loss in task_losses.items() if lam[task] != 0.0]
    terms += list(icl_losses.values())
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
