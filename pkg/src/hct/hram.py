"""Hierarchical relation aggregation across task feature maps.

For a primary task ``i`` each secondary task ``j`` contributes a correlation
attention map (query from ``i``, key/value from ``j``) squeezed to
``C / (n - 1)`` channels. The ``n - 1`` slices are concatenated back to ``C``
channels, added to the mapped self-attention of ``i`` and mapped once more.
An optional skip adds the channel-sliced query of the self-attention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import QKV, AttentionConfig, Grid, PoolingAttention, pooled_qkv, scaled_attention
from .errors import ConfigError, DimensionError, UsageError
from .layers import LayerNorm, Linear, Mlp, Module
from .tensor import Tensor

BOX_DIM = 256


class TaskId(str, enum.Enum):
    PHASE = "phase"
    STEP = "step"
    ACTION = "action"
    INSTRUMENT = "instrument"

    @classmethod
    def parse(cls, name) -> "TaskId":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigError(f"unknown task {name!r}; expected one of {[t.value for t in cls]}") from None


ALL_TASKS = (TaskId.PHASE, TaskId.STEP, TaskId.ACTION, TaskId.INSTRUMENT)


def secondary_width(channels: int, n_tasks: int) -> int:
    if n_tasks < 2:
        raise ConfigError(f"aggregation needs at least 2 tasks, got n={n_tasks}")
    if channels % (n_tasks - 1):
        raise ConfigError(f"channels C={channels} not divisible by n-1={n_tasks - 1} (n={n_tasks} tasks)")
    return channels // (n_tasks - 1)


@dataclass
class TaskFeatures:
    """Per-task token maps ``[B, L, C]`` sharing one grid.

    ``instrument`` holds projected box tokens (zero rows past each clip's box
    count) and ``instrument_mask`` marks the real boxes.
    """

    maps: dict[TaskId, Tensor]
    grid: Grid
    instrument_mask: np.ndarray | None = None

    def __getitem__(self, task) -> Tensor:
        task = TaskId.parse(task)
        if task not in self.maps:
            raise UsageError(f"task {task.value} has no features; list it in the task configuration")
        return self.maps[task]


class InstrumentProjector(Module):
    """Linear(256 -> C), GELU, Linear(C -> C) per box, then zero-padding to L rows."""

    def __init__(self, rng: np.random.Generator, channels: int, box_dim: int = BOX_DIM):
        self.fc1 = Linear(rng, box_dim, channels)
        self.fc2 = Linear(rng, channels, channels)
        self._box_dim = box_dim
        self._channels = channels

    def __call__(self, boxes: Sequence[np.ndarray], rows: int) -> tuple[Tensor, np.ndarray]:
        """Project per-clip box features into ``[B, rows, C]`` plus a ``[B, rows]`` validity mask."""
        counts = [0 if b is None else len(b) for b in boxes]
        for k, n in enumerate(counts):
            if n > rows:
                raise DimensionError(f"clip {k} has {n} boxes but only {rows} token slots")
        B = len(boxes)
        mask = np.zeros((B, rows), dtype=bool)
        index = np.full((B, rows), sum(counts), dtype=np.int64)
        start = 0
        for k, n in enumerate(counts):
            mask[k, :n] = True
            index[k, :n] = np.arange(start, start + n)
            start += n
        dtype = self.fc1.weight.dtype
        feats = [np.asarray(b, dtype=dtype).reshape(-1, self._box_dim) for b in boxes if b is not None and len(b)]
        if feats:
            x = T.Tensor(np.concatenate(feats))
            y = self.fc2(T.gelu(self.fc1(x)))
            table = T.concat([y, T.Tensor(np.zeros((1, self._channels), dtype=dtype))], axis=0)
        else:
            table = T.Tensor(np.zeros((1, self._channels), dtype=dtype))
        return T.getitem(table, index), mask


def project_instrument(f_t: np.ndarray, target: tuple[int, int], projector: InstrumentProjector) -> Tensor:
    """Single-clip form: ``[B_box, 256]`` -> ``[L, C]``."""
    L, C = target
    if C != projector._channels:
        raise DimensionError(f"projector width {projector._channels} != target channels {C}")
    out, _ = projector([np.asarray(f_t).reshape(-1, projector._box_dim)], L)
    return out[0]


class CorrelationAttention(Module):
    """Query from the primary map, key/value from a secondary map."""

    def __init__(self, rng: np.random.Generator, cfg: AttentionConfig):
        self._cfg = cfg
        self.qkv = QKV(rng, cfg.channels)

    def __call__(self, f_i: Tensor, grid_i, f_j: Tensor, grid_j, key_mask=None) -> Tensor:
        cfg = self._cfg
        if key_mask is not None and cfg.kv_stride != (1, 1, 1):
            cfg = AttentionConfig(cfg.channels, cfg.heads, cfg.q_stride, (1, 1, 1), cfg.pool)
        f_q, f_k, f_v, _, _ = pooled_qkv(f_i, grid_i, f_j, grid_j, cfg, self.qkv)
        return scaled_attention(f_q, f_k, f_v, cfg.heads, key_mask)


def correlation_attention(f_i: Tensor, grid_i, f_j: Tensor, grid_j, weights: CorrelationAttention,
                          key_mask=None) -> Tensor:
    return weights(f_i, grid_i, f_j, grid_j, key_mask)


class PairWeights(Module):
    def __init__(self, rng: np.random.Generator, cfg: AttentionConfig, out_width: int):
        self.norm = LayerNorm(cfg.channels)
        self.corr = CorrelationAttention(rng, cfg)
        self.mlp_j = Mlp(rng, cfg.channels, cfg.channels, out_width)


class TaskAggregator(Module):
    """All weights needed to refine one primary task."""

    def __init__(self, rng: np.random.Generator, primary: TaskId, secondaries: Sequence[TaskId],
                 cfg: AttentionConfig, n_tasks: int):
        C = cfg.channels
        width = secondary_width(C, n_tasks)
        self._primary = primary
        self._secondaries = tuple(secondaries)
        self._cfg = cfg
        self._width = width
        # box tokens have no spatial layout, so the instrument query path is never pooled
        self_cfg = cfg if primary is not TaskId.INSTRUMENT else AttentionConfig(C, cfg.heads, (1, 1, 1), (1, 1, 1), cfg.pool)
        if primary is TaskId.INSTRUMENT:
            pair_cfg = AttentionConfig(C, cfg.heads, (1, 1, 1), cfg.kv_stride, cfg.pool)
        else:
            pair_cfg = cfg
        self.mhpa = PoolingAttention(rng, self_cfg)
        self.pairs = {j.value: PairWeights(rng, pair_cfg, width) for j in self._secondaries}
        self.mlp_i = Mlp(rng, C, C, C)
        self.mlp_ij = Mlp(rng, C, C, C)

    @property
    def width(self) -> int:
        return self._width

    def self_attention(self, f_i: Tensor, grid, key_mask=None) -> tuple[Tensor, Tensor, Grid]:
        cfg = self.mhpa.cfg
        if key_mask is not None and cfg.kv_stride != (1, 1, 1):
            raise ConfigError("instrument self-attention must use unit strides")
        return self.mhpa(f_i, grid, key_mask)


def fuse_pair(c_ji: Tensor, self_att: Tensor, agg: TaskAggregator, secondary) -> Tensor:
    """``concat(MLP_j(C_ji), MLP_i(self_att))`` -> ``[..., L1, C/(n-1) + C]``."""
    pair = agg.pairs[TaskId.parse(secondary).value]
    return T.concat_channels([pair.mlp_j(c_ji), agg.mlp_i(self_att)])


def aggregate_task(primary, feats: TaskFeatures, agg: TaskAggregator, use_slicing_skip: bool = False) -> Tensor:
    """Refined features for ``primary``; same shape as its input when the query stride is unit."""
    primary = TaskId.parse(primary)
    f_i = feats[primary]
    grid = feats.grid
    C = f_i.shape[-1]
    mask = feats.instrument_mask
    self_mask = mask if primary is TaskId.INSTRUMENT else None
    att, f_q, _ = agg.self_attention(f_i, grid, self_mask)
    xn_i = agg.mhpa.norm(f_i)
    slices = []
    for j in agg._secondaries:
        f_j = feats[j]
        pair = agg.pairs[j.value]
        km = mask if j is TaskId.INSTRUMENT else None
        c_ji = pair.corr(xn_i, grid, pair.norm(f_j), grid, km)
        slices.append(pair.mlp_j(c_ji))
    secondary = T.concat_channels(slices)
    if secondary.shape[-1] != C:
        raise DimensionError(f"secondary slices sum to {secondary.shape[-1]} channels, expected {C}")
    out = agg.mlp_ij(secondary + agg.mlp_i(att))
    if use_slicing_skip:
        out = out + T.slice_channels(f_q, 0, C)
    return out


@dataclass
class HramConfig:
    tasks: list = field(default_factory=lambda: [t.value for t in ALL_TASKS])
    q_stride: Grid = (1, 1, 1)
    kv_stride: Grid = (1, 2, 2)
    slicing_skip: list = field(default_factory=lambda: [TaskId.INSTRUMENT.value])

    def task_ids(self) -> list[TaskId]:
        ids = [TaskId.parse(t) for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate tasks in {self.tasks}")
        return ids


class HRAM(Module):
    def __init__(self, rng: np.random.Generator, channels: int, heads: int, cfg: HramConfig):
        self._cfg = cfg
        tasks = cfg.task_ids()
        n = len(tasks)
        secondary_width(channels, n)
        acfg = AttentionConfig(channels, heads, cfg.q_stride, cfg.kv_stride)
        self._tasks = tasks
        self._skip = {TaskId.parse(t) for t in cfg.slicing_skip}
        self.tasks = {i.value: TaskAggregator(rng, i, [j for j in tasks if j is not i], acfg, n) for i in tasks}

    @property
    def task_ids(self) -> list[TaskId]:
        return list(self._tasks)

    def __call__(self, feats: TaskFeatures) -> dict[TaskId, Tensor]:
        return {i: aggregate_task(i, feats, self.tasks[i.value], i in self._skip) for i in self._tasks}
