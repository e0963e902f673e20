import numpy as np
import pytest

from hct import tensor as T
from hct.attention import (AttentionConfig, MHPABlock, PoolingAttention, QKV, Trunk, TrunkConfig, pool_tokens,
                           pooled_grid, pooled_qkv, scaled_attention)
from hct.errors import ConfigError, DimensionError
from hct.hram import CorrelationAttention, correlation_attention
from hct.layers import make_rng
from hct.tensor import Tensor

from oracles import attention_loop, avg_pool_loop


def test_scaled_attention_matches_loop_oracle_100_instances(rng):
    worst = 0.0
    for _ in range(100):
        L1, L2 = rng.integers(1, 7, size=2)
        heads = int(rng.choice([1, 2, 3]))
        C = heads * int(rng.integers(1, 4))
        q, k, v = rng.standard_normal((L1, C)), rng.standard_normal((L2, C)), rng.standard_normal((L2, C))
        got = scaled_attention(Tensor(q), Tensor(k), Tensor(v), heads).data
        worst = max(worst, np.abs(got - attention_loop(q, k, v, heads)).max())
    assert worst < 1e-10


def test_correlation_attention_matches_loop_oracle_100_instances(rng):
    worst = 0.0
    for n in range(100):
        heads = int(rng.choice([1, 2]))
        C = 2 * heads
        gi = tuple(int(v) for v in rng.integers(1, 3, size=3))
        gj = tuple(int(v) for v in rng.integers(1, 3, size=3))
        while np.prod(gi) > 6:
            gi = (1,) + gi[1:]
        while np.prod(gj) > 6:
            gj = (1,) + gj[1:]
        cfg = AttentionConfig(C, heads, (1, 1, 1), (1, 1, 1))
        w = CorrelationAttention(make_rng(n), cfg)
        f_i, f_j = rng.standard_normal((int(np.prod(gi)), C)), rng.standard_normal((int(np.prod(gj)), C))
        got = correlation_attention(Tensor(f_i), gi, Tensor(f_j), gj, w).data
        q = f_i @ w.qkv.q.weight.data
        k = f_j @ w.qkv.k.weight.data
        v = f_j @ w.qkv.v.weight.data
        worst = max(worst, np.abs(got - attention_loop(q, k, v, heads)).max())
    assert worst < 1e-10


def test_correlation_attention_with_pooled_keys_matches_oracle(rng):
    cfg = AttentionConfig(4, 2, (1, 1, 1), (1, 2, 2))
    w = CorrelationAttention(make_rng(0), cfg)
    gi, gj = (2, 2, 2), (1, 3, 2)
    f_i, f_j = rng.standard_normal((8, 4)), rng.standard_normal((6, 4))
    got = w(Tensor(f_i), gi, Tensor(f_j), gj).data
    kp, _ = avg_pool_loop(f_j @ w.qkv.k.weight.data, gj, (1, 2, 2))
    vp, _ = avg_pool_loop(f_j @ w.qkv.v.weight.data, gj, (1, 2, 2))
    np.testing.assert_allclose(got, attention_loop(f_i @ w.qkv.q.weight.data, kp, vp, 2), atol=1e-10)


def test_key_mask_equals_dropping_masked_keys(rng):
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    mask = np.array([True, False, True, True, False])
    got = scaled_attention(Tensor(q), Tensor(k), Tensor(v), 2, mask).data
    np.testing.assert_allclose(got, attention_loop(q, k[mask], v[mask], 2), atol=1e-12)


def test_attention_weights_rows_sum_to_one(rng):
    from hct.attention import attention_weights
    w = attention_weights(Tensor(rng.standard_normal((2, 3, 6))), Tensor(rng.standard_normal((2, 5, 6))), 3).data
    assert w.shape == (2, 3, 3, 5)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_pooled_grid_is_ceiling():
    assert pooled_grid((8, 8, 8), (1, 2, 2)) == (8, 4, 4)
    assert pooled_grid((3, 5, 7), (2, 2, 3)) == (2, 3, 3)


def test_pool_tokens_batched_matches_oracle(rng):
    x = rng.standard_normal((2, 3 * 4 * 5, 6))
    y, g = pool_tokens(Tensor(x), (3, 4, 5), (2, 2, 2))
    assert g == (2, 2, 3)
    for n in range(2):
        np.testing.assert_allclose(y.data[n], avg_pool_loop(x[n], (3, 4, 5), (2, 2, 2))[0], atol=1e-12)
    with pytest.raises(DimensionError):
        pool_tokens(Tensor(x), (3, 4, 4), (2, 2, 2))


def test_pooled_qkv_shapes(rng):
    cfg = AttentionConfig(8, 2, (1, 2, 2), (2, 2, 2))
    w = QKV(make_rng(0), 8)
    f = Tensor(rng.standard_normal((2, 4 * 4 * 4, 8)))
    f_q, f_k, f_v, gq, gkv = pooled_qkv(f, (4, 4, 4), f, (4, 4, 4), cfg, w)
    assert gq == (4, 2, 2) and gkv == (2, 2, 2)
    assert f_q.shape == (2, 16, 8) and f_k.shape == f_v.shape == (2, 8, 8)


def test_mhpa_block_residual_uses_pooled_query(rng):
    cfg = AttentionConfig(8, 2, (1, 2, 2), (1, 2, 2))
    blk = MHPABlock(make_rng(0), cfg, mlp_ratio=2)
    # zero the attention output and the MLP so the block reduces to its residual path
    blk.attn.proj.weight.data[:] = 0
    blk.attn.proj.bias.data[:] = 0
    blk.ffn.mlp.fc2.weight.data[:] = 0
    blk.ffn.mlp.fc2.bias.data[:] = 0
    x = rng.standard_normal((2 * 4 * 4, 8))
    y, g = blk(Tensor(x), (2, 4, 4))
    assert g == (2, 2, 2)
    np.testing.assert_allclose(y.data, avg_pool_loop(x, (2, 4, 4), (1, 2, 2))[0], atol=1e-12)


def test_pooling_attention_rejects_mask_with_pooled_keys(rng):
    att = PoolingAttention(make_rng(0), AttentionConfig(4, 2, (1, 1, 1), (1, 2, 2)))
    with pytest.raises(ConfigError):
        att(Tensor(rng.standard_normal((4, 4))), (1, 2, 2), np.ones(4, bool))


def test_qkv_projections_are_bias_free():
    w = QKV(make_rng(0), 4)
    assert {n for n, _ in w.named_parameters()} == {"q.weight", "k.weight", "v.weight"}


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(10, 4)
    with pytest.raises(ConfigError):
        AttentionConfig(8, 2, (0, 1, 1))


def test_trunk_output_grid_and_shape(rng):
    cfg = TrunkConfig(clip_len=4, frame_size=(8, 8), channels=8, heads=2, q_strides=[(1, 1, 1), (1, 2, 2)])
    trunk = Trunk(make_rng(0), cfg)
    x, g = trunk(rng.standard_normal((3, 4, 8, 8, 3)))
    assert g == cfg.output_grid() == (2, 1, 1)
    assert x.shape == (3, 2, 8)
    with pytest.raises(DimensionError):
        trunk(rng.standard_normal((3, 5, 8, 8, 3)))
    with pytest.raises(ConfigError):
        TrunkConfig(clip_len=5).token_grid()


def test_trunk_patchify_round_trip(rng):
    cfg = TrunkConfig(clip_len=4, frame_size=(8, 8), channels=8, heads=2)
    trunk = Trunk(make_rng(0), cfg)
    clip = rng.standard_normal((1, 4, 8, 8, 3))
    p = trunk.patchify(clip)
    assert p.shape == (1, 2 * 2 * 2, 2 * 4 * 4 * 3)
    # token (0, 1, 0) is frames 0-1, rows 4-7, cols 0-3
    np.testing.assert_array_equal(p[0, 2].reshape(2, 4, 4, 3), clip[0, 0:2, 4:8, 0:4])


def test_default_trunk_gives_128_tokens():
    cfg = TrunkConfig()
    assert cfg.output_grid() == (8, 4, 4)
