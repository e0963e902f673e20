"""Multi-head pooling attention and the shared video trunk.

Token maps are ``[..., L, C]`` tensors paired with a grid ``(l, h, m)`` giving
the temporal and spatial extents, ``L = l * h * m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapters import SpatialAdapter, TemporalAdapter
from .errors import ConfigError, DimensionError
from .layers import LayerNorm, Linear, Mlp, Module, trunc_normal
from .tensor import Tensor

Grid = tuple[int, int, int]

MASK_BIAS = -1e9


def _stride(s) -> Grid:
    s = tuple(int(v) for v in s)
    if len(s) != 3 or min(s) < 1:
        raise ConfigError(f"stride must be three integers >= 1, got {s}")
    return s


def pooled_grid(grid: Sequence[int], stride: Sequence[int]) -> Grid:
    return tuple(-(-g // s) for g, s in zip(grid, stride))


@dataclass
class AttentionConfig:
    channels: int = 48
    heads: int = 4
    q_stride: Grid = (1, 1, 1)
    kv_stride: Grid = (1, 2, 2)
    pool: str = "avg"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        self.q_stride = _stride(self.q_stride)
        self.kv_stride = _stride(self.kv_stride)

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def pool_tokens(x: Tensor, grid: Sequence[int], stride: Sequence[int], kind: str = "avg") -> tuple[Tensor, Grid]:
    """Pool a ``[..., L, C]`` token map over its ``(l, h, m)`` grid."""
    grid = tuple(grid)
    L, C = x.shape[-2:]
    if int(np.prod(grid)) != L:
        raise DimensionError(f"token count {L} does not factor as grid {grid}")
    if tuple(stride) == (1, 1, 1):
        return x, grid
    lead = x.shape[:-2]
    out_grid = pooled_grid(grid, stride)
    y = T.pool_st(x.reshape(lead + grid + (C,)), stride, kind)
    return y.reshape(lead + (int(np.prod(out_grid)), C)), out_grid


class QKV(Module):
    """Bias-free q/k/v projections; zero (padded) rows stay zero."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.q = Linear(rng, dim, dim, bias=False)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim, bias=False)


def pooled_qkv(f_src_q: Tensor, grid_q: Sequence[int], f_src_kv: Tensor, grid_kv: Sequence[int],
               cfg: AttentionConfig, w: QKV):
    """Project and pool: q from the first map at ``q_stride``, k/v from the second at ``kv_stride``.

    Returns ``(f_q, f_k, f_v, grid_q_out, grid_kv_out)``.
    """
    if f_src_q.shape[-1] != cfg.channels or f_src_kv.shape[-1] != cfg.channels:
        raise DimensionError(
            f"channel mismatch: query map {f_src_q.shape}, key/value map {f_src_kv.shape}, expected C={cfg.channels}")
    f_q, gq = pool_tokens(w.q(f_src_q), grid_q, cfg.q_stride, cfg.pool)
    f_k, gkv = pool_tokens(w.k(f_src_kv), grid_kv, cfg.kv_stride, cfg.pool)
    f_v, _ = pool_tokens(w.v(f_src_kv), grid_kv, cfg.kv_stride, cfg.pool)
    return f_q, f_k, f_v, gq, gkv


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, (L, C) = x.shape[:-2], x.shape[-2:]
    if C % heads:
        raise DimensionError(f"{C} channels cannot split into {heads} heads")
    y = x.reshape(lead + (L, heads, C // heads))
    nd = y.ndim
    return T.transpose(y, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    y = T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    lead, (L, H, d) = y.shape[:-3], y.shape[-3:]
    return y.reshape(lead + (L, H * d))


def attention_weights(f_q: Tensor, f_k: Tensor, heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Per-head ``softmax(q k^T / sqrt(d))`` with shape ``[..., H, L1, L2]``."""
    if f_q.shape[-1] != f_k.shape[-1]:
        raise DimensionError(f"query/key width mismatch: {f_q.shape} vs {f_k.shape}")
    d = f_q.shape[-1] // heads
    q, k = _split_heads(f_q, heads), _split_heads(f_k, heads)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(d))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km, 0.0, MASK_BIAS).astype(scores.dtype)
        # [..., L2] -> [..., 1, 1, L2]
        scores = scores + bias[..., None, None, :]
    return T.softmax_rows(scores)


def scaled_attention(f_q: Tensor, f_k: Tensor, f_v: Tensor, heads: int,
                     key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head ``softmax(f_q f_k^T / sqrt(d)) f_v``; heads re-merged to ``[..., L1, C]``."""
    if f_k.shape[-2] != f_v.shape[-2] or f_k.shape[-1] != f_v.shape[-1]:
        raise DimensionError(f"key/value shape mismatch: {f_k.shape} vs {f_v.shape}")
    if f_q.shape[-1] % heads:
        raise DimensionError(f"{f_q.shape[-1]} channels cannot split into {heads} heads")
    attn = attention_weights(f_q, f_k, heads, key_mask)
    return _merge_heads(T.matmul(attn, _split_heads(f_v, heads)))


class FeedForward(Module):
    """Pre-norm MLP sublayer; an optional spatial adapter acts on the MLP output."""

    def __init__(self, rng: np.random.Generator, dim: int, mlp_ratio: int = 4,
                 s_ada: SpatialAdapter | None = None):
        self.norm = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio * dim, dim)
        self.s_ada = s_ada

    def __call__(self, x: Tensor) -> Tensor:
        h = self.mlp(self.norm(x))
        if self.s_ada is not None:
            h = self.s_ada(h)
        return x + h


class PoolingAttention(Module):
    """Pre-norm multi-head pooling self-attention sublayer (no residual)."""

    def __init__(self, rng: np.random.Generator, cfg: AttentionConfig):
        self._cfg = cfg
        C = cfg.channels
        self.norm = LayerNorm(C)
        self.qkv = QKV(rng, C)
        self.proj = Linear(rng, C, C)

    @property
    def cfg(self) -> AttentionConfig:
        return self._cfg

    def __call__(self, x: Tensor, grid: Sequence[int], key_mask=None) -> tuple[Tensor, Tensor, Grid]:
        """Returns ``(proj(attn), f_q, grid_out)``."""
        xn = self.norm(x)
        if key_mask is not None and self._cfg.kv_stride != (1, 1, 1):
            raise ConfigError("key padding masks require unit key/value stride")
        f_q, f_k, f_v, gq, _ = pooled_qkv(xn, grid, xn, grid, self._cfg, self.qkv)
        att = scaled_attention(f_q, f_k, f_v, self._cfg.heads, key_mask)
        return self.proj(att), f_q, gq


class MHPABlock(Module):
    """Pre-norm pooling-attention block.

    ``x -> [t_ada] -> x_pool + attn(x) -> + ffn``. The residual is taken from
    the query-pooled input so shapes match under query striding.
    """

    def __init__(self, rng: np.random.Generator, cfg: AttentionConfig, mlp_ratio: int = 4,
                 t_ada: TemporalAdapter | None = None, s_ada: SpatialAdapter | None = None):
        self._cfg = cfg
        self.t_ada = t_ada
        self.attn = PoolingAttention(rng, cfg)
        self.ffn = FeedForward(rng, cfg.channels, mlp_ratio, s_ada)

    @property
    def cfg(self) -> AttentionConfig:
        return self._cfg

    def __call__(self, x: Tensor, grid: Sequence[int], key_mask=None) -> tuple[Tensor, Grid]:
        grid = tuple(grid)
        if self.t_ada is not None:
            x = self.t_ada(x, grid)
        att, _, gq = self.attn(x, grid, key_mask)
        res, _ = pool_tokens(x, grid, self._cfg.q_stride, self._cfg.pool)
        return self.ffn(res + att), gq


def mhpa_block(f: Tensor, grid: Sequence[int], block: MHPABlock) -> tuple[Tensor, Grid]:
    return block(f, grid)


@dataclass
class TrunkConfig:
    clip_len: int = 16
    frame_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch: Grid = (2, 4, 4)
    channels: int = 48
    heads: int = 4
    q_strides: list = field(default_factory=lambda: [(1, 1, 1), (1, 2, 2)])
    kv_stride: Grid = (1, 2, 2)
    mlp_ratio: int = 4
    pool: str = "avg"
    t_adapter: bool = False
    s_adapter: bool = False
    adapter_ratio: float = 0.25
    adapter_kernel: Grid = (3, 1, 1)

    @property
    def blocks(self) -> int:
        return len(self.q_strides)

    def token_grid(self) -> Grid:
        pt, ph, pw = self.patch
        H, W = self.frame_size
        if self.clip_len % pt or H % ph or W % pw:
            raise ConfigError(f"clip {self.clip_len}x{H}x{W} not divisible by patch {self.patch}")
        return (self.clip_len // pt, H // ph, W // pw)

    def output_grid(self) -> Grid:
        g = self.token_grid()
        for s in self.q_strides:
            g = pooled_grid(g, s)
        return g


class Trunk(Module):
    """Patch embedding followed by a stack of pooling-attention blocks."""

    def __init__(self, rng: np.random.Generator, cfg: TrunkConfig):
        self._cfg = cfg
        C = cfg.channels
        pt, ph, pw = cfg.patch
        grid = cfg.token_grid()
        self.embed = Linear(rng, pt * ph * pw * cfg.in_channels, C)
        self.pos = trunc_normal(rng, (int(np.prod(grid)), C))
        self.blocks = []
        for s in cfg.q_strides:
            acfg = AttentionConfig(C, cfg.heads, s, cfg.kv_stride, cfg.pool)
            t = TemporalAdapter(rng, C, cfg.adapter_ratio, cfg.adapter_kernel) if cfg.t_adapter else None
            sa = SpatialAdapter(rng, C, cfg.adapter_ratio) if cfg.s_adapter else None
            self.blocks.append(MHPABlock(rng, acfg, cfg.mlp_ratio, t, sa))

    @property
    def cfg(self) -> TrunkConfig:
        return self._cfg

    def patchify(self, clip: np.ndarray) -> np.ndarray:
        """``[B, T, H, W, Cin]`` -> ``[B, L, pt*ph*pw*Cin]`` with non-overlapping patches."""
        cfg = self._cfg
        clip = np.asarray(clip)
        if clip.ndim == 4:
            clip = clip[None]
        B, Tn, H, W, Cin = clip.shape
        if Tn != cfg.clip_len:
            raise DimensionError(f"clip length {Tn} != configured clip_len {cfg.clip_len}")
        if (H, W) != tuple(cfg.frame_size) or Cin != cfg.in_channels:
            raise DimensionError(f"clip frames {H}x{W}x{Cin} != configured {cfg.frame_size}x{cfg.in_channels}")
        pt, ph, pw = cfg.patch
        l, h, m = cfg.token_grid()
        x = clip.reshape(B, l, pt, h, ph, m, pw, Cin).transpose(0, 1, 3, 5, 2, 4, 6, 7)
        return x.reshape(B, l * h * m, pt * ph * pw * Cin)

    def __call__(self, clip) -> tuple[Tensor, Grid]:
        patches = Tensor(self.patchify(clip).astype(self.pos.dtype))
        x = self.embed(patches) + self.pos
        grid = self._cfg.token_grid()
        for blk in self.blocks:
            x, grid = blk(x, grid)
        return x, grid


def trunk_forward(clip, trunk: Trunk) -> tuple[Tensor, Grid]:
    return trunk(clip)
