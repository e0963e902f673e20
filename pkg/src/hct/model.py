"""The multi-task model: shared trunk, per-task stems, HRAM, task blocks, heads, ICL projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapters import SpatialAdapter
from .attention import FeedForward, Trunk, TrunkConfig
from .hram import ALL_TASKS, HRAM, HramConfig, InstrumentProjector, TaskFeatures, TaskId
from .layers import Linear, Module, make_rng
from .objectives import HeadSet, IclConfig, icl_embed, icl_pair_loss, pair_name
from .tensor import Tensor

VISUAL_TASKS = (TaskId.PHASE, TaskId.STEP, TaskId.ACTION)


@dataclass
class ModelConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    hram: HramConfig = field(default_factory=HramConfig)
    use_hram: bool = True
    icl: IclConfig = field(default_factory=IclConfig)
    use_icl: bool = True
    class_counts: dict = field(default_factory=lambda: {"phase": 4, "step": 10, "action": 49, "instrument": 13})


@dataclass
class ModelOutput:
    logits: dict[TaskId, Tensor]
    features: dict[TaskId, Tensor]
    embeddings: dict[TaskId, Tensor]
    box_index: np.ndarray  # [n_boxes, 2] (clip, row) of each instrument logit row
    grid: tuple
    embedding_rows: dict[TaskId, np.ndarray] = field(default_factory=dict)  # clip index of each embedding row


class HCTModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self._cfg = cfg
        rng = make_rng(seed)
        C = cfg.trunk.channels
        self.trunk = Trunk(rng, cfg.trunk)
        self.stems = {t.value: Linear(rng, C, C) for t in VISUAL_TASKS}
        self.projector = InstrumentProjector(rng, C)
        self.hram = HRAM(rng, C, cfg.trunk.heads, cfg.hram) if cfg.use_hram else None
        s_ada = cfg.trunk.s_adapter
        self.task_blocks = {
            t.value: FeedForward(rng, C, cfg.trunk.mlp_ratio,
                                 SpatialAdapter(rng, C, cfg.trunk.adapter_ratio) if s_ada else None)
            for t in ALL_TASKS
        }
        self.heads = HeadSet(rng, C, cfg.class_counts)
        P = cfg.icl.proj_dim or C
        self.icl_proj = {t.value: Linear(rng, C, P) for t in cfg.icl.tasks()} if cfg.use_icl else {}

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def task_features(self, clips, box_features: Sequence[np.ndarray]) -> TaskFeatures:
        shared, grid = self.trunk(clips)
        maps = {t: self.stems[t.value](shared) for t in VISUAL_TASKS}
        L = shared.shape[-2]
        inst, mask = self.projector(box_features, L)
        maps[TaskId.INSTRUMENT] = inst
        return TaskFeatures(maps, grid, mask)

    def __call__(self, clips, box_features: Sequence[np.ndarray]) -> ModelOutput:
        feats = self.task_features(clips, box_features)
        refined = dict(feats.maps)
        if self.hram is not None:
            refined.update(self.hram(feats))
        out = {t: self.task_blocks[t.value](refined[t]) for t in ALL_TASKS}
        mask = feats.instrument_mask

        logits = {
            TaskId.PHASE: self.heads.phase(T.mean(out[TaskId.PHASE], axis=-2)),
            TaskId.STEP: self.heads.step(T.mean(out[TaskId.STEP], axis=-2)),
        }
        box_index = np.argwhere(mask)
        inst = out[TaskId.INSTRUMENT]
        rows = T.getitem(inst, (box_index[:, 0], box_index[:, 1]))
        logits[TaskId.INSTRUMENT] = self.heads.instrument(rows)
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(inst.dtype)
        weights = (mask / counts).astype(inst.dtype)[..., None]
        inst_pooled = T.tsum(inst * weights, axis=-2)
        fused = T.concat_channels([T.mean(out[TaskId.ACTION], axis=-2), inst_pooled])
        logits[TaskId.ACTION] = self.heads.action(fused)

        emb, rows = {}, {}
        for k, proj in self.icl_proj.items():
            t = TaskId.parse(k)
            if t is TaskId.INSTRUMENT:
                # only real boxes carry instrument content; clips without boxes sit out
                keep = np.flatnonzero(mask.any(axis=1))
                rows[t] = keep
                if len(keep):
                    emb[t] = icl_embed(T.getitem(inst, keep), proj, weights[keep, :, 0])
            else:
                rows[t] = np.arange(len(mask))
                emb[t] = icl_embed(out[t], proj)
        return ModelOutput(logits, out, emb, box_index, feats.grid, rows)

    def icl_losses(self, output: ModelOutput) -> dict[str, Tensor]:
        if not self.icl_proj:
            return {}
        tau = self._cfg.icl.temperature
        losses = {}
        for a, b in self._cfg.icl.pair_ids():
            ra, rb = output.embedding_rows[a], output.embedding_rows[b]
            shared = np.intersect1d(ra, rb)
            if len(shared) < 2:
                # fewer than two usable clips leaves no negatives; the pair sits this batch out
                losses[pair_name(a, b)] = Tensor(np.zeros((), dtype=T.get_default_dtype()))
                continue
            fa = T.getitem(output.embeddings[a], np.searchsorted(ra, shared))
            fb = T.getitem(output.embeddings[b], np.searchsorted(rb, shared))
            losses[pair_name(a, b)] = icl_pair_loss(fa, fb, tau)
        return losses
