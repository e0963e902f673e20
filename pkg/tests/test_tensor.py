import numpy as np
import pytest
from hypothesis import given, strategies as st

from hct import tensor as T
from hct.errors import ConfigError, DegenerateInputError, DimensionError, NumericalError, UsageError
from hct.tensor import Tensor

from oracles import avg_pool_loop, bce_scalar, depthwise_conv_loop

TOL = 1e-4


def leaf(rng, *shape, lo=None, hi=None):
    data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def scalarize(fn, rng):
    """Contract an op's output with fixed random weights so every output entry matters."""
    cache = {}

    def f(*xs):
        y = fn(*xs)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(y.shape)
        return T.tsum(y * cache["w"])

    return f


UNARY = {
    "exp": (T.exp, {}),
    "log": (T.log, {"lo": 0.5, "hi": 2.0}),
    "sqrt": (T.sqrt, {"lo": 0.5, "hi": 2.0}),
    "tanh": (T.tanh, {}),
    "sigmoid": (T.sigmoid, {}),
    "gelu": (T.gelu, {}),
    "softmax_rows": (T.softmax_rows, {}),
    "log_softmax": (T.log_softmax, {}),
    "l2_normalize": (T.l2_normalize, {}),
    "swap_last": (T.swap_last, {}),
    "sum_axis": (lambda x: T.tsum(x, axis=1), {}),
    "mean_axis": (lambda x: T.mean(x, axis=-1, keepdims=True), {}),
    "reshape": (lambda x: T.reshape(x, (4, 6)), {}),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), {}),
    "getitem_slice": (lambda x: x[:, 1:3], {}),
    "getitem_fancy_repeat": (lambda x: T.getitem(x, (np.array([0, 0, 1]), np.array([2, 2, 0]))), {}),
    "slice_channels": (lambda x: T.slice_channels(x, 1, 3), {}),
    "pad_rows": (lambda x: T.pad_rows(x, 5), {}),
    "neg": (lambda x: -x, {}),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    fn, kw = UNARY[name]
    x = leaf(rng, 2, 3, 4, **kw)
    assert T.grad_check(scalarize(fn, rng), [x]) < TOL


def test_relu_gradient_away_from_kink(rng):
    x = Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.1, 1.0, (3, 4)), requires_grad=True)
    assert T.grad_check(scalarize(T.relu, rng), [x]) < TOL


BINARY = {
    "add_broadcast": (T.add, (3, 4), (4,)),
    "sub_broadcast": (T.sub, (2, 3, 4), (3, 1)),
    "mul_broadcast": (T.mul, (3, 4), (1, 4)),
    "div": (T.div, (3, 4), (3, 4)),
    "matmul_2d_weight": (T.matmul, (2, 3, 4), (4, 5)),
    "matmul_batched": (T.matmul, (2, 3, 4), (2, 4, 5)),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), (3, 2), (3, 4)),
    "cosine_sim": (T.cosine_sim, (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name, rng):
    fn, sa, sb = BINARY[name]
    a = leaf(rng, *sa)
    b = Tensor(rng.uniform(0.5, 2.0, sb), requires_grad=True) if name == "div" else leaf(rng, *sb)
    assert T.grad_check(scalarize(fn, rng), [a, b]) < TOL


def test_layer_norm_gradient_and_values(rng):
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    assert T.grad_check(scalarize(T.layer_norm, rng), [x, g, b]) < TOL
    y = T.layer_norm(x, g, b).data
    xd = x.data
    ref = (xd - xd.mean(-1, keepdims=True)) / np.sqrt(xd.var(-1, keepdims=True) + 1e-5) * g.data + b.data
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_depthwise_conv_gradient_and_loop_oracle(rng):
    x, k = leaf(rng, 2, 3, 2, 2, 3), leaf(rng, 3, 1, 3, 3)
    assert T.grad_check(scalarize(T.depthwise_conv3d, rng), [x, k]) < TOL
    y = T.depthwise_conv3d(x, k).data
    for n in range(2):
        np.testing.assert_allclose(y[n], depthwise_conv_loop(x.data[n], k.data), atol=1e-12)


def test_depthwise_conv_even_kernel_is_config_error(rng):
    with pytest.raises(ConfigError):
        T.depthwise_conv3d(leaf(rng, 3, 2, 2, 2), leaf(rng, 2, 1, 1, 2))


@pytest.mark.parametrize("stride", [(1, 2, 2), (2, 2, 2), (2, 3, 1)])
def test_avg_pool_gradient_and_loop_oracle(stride, rng):
    grid = (3, 4, 5)
    x = leaf(rng, 2, *grid, 3)
    assert T.grad_check(scalarize(lambda v: T.pool_st(v, stride), rng), [x]) < TOL
    y = T.pool_st(x, stride).data
    for n in range(2):
        ref, outs = avg_pool_loop(x.data[n].reshape(-1, 3), grid, stride)
        np.testing.assert_allclose(y[n].reshape(-1, 3), ref, atol=1e-12)
        assert y.shape[1:4] == outs


def test_max_pool_gradient_with_distinct_values(rng):
    x = Tensor(rng.permutation(2 * 4 * 4 * 2).reshape(2, 4, 4, 2).astype(float) / 10, requires_grad=True)
    assert T.grad_check(scalarize(lambda v: T.pool_st(v, (1, 2, 2), "max"), rng), [x]) < TOL


def test_unit_pool_is_identity(rng):
    x = leaf(rng, 2, 2, 2, 3)
    assert T.pool_st(x, (1, 1, 1)) is x


def test_bce_with_logits_values_gradient_and_stability(rng):
    z = leaf(rng, 4, 3)
    t = rng.integers(0, 2, (4, 3)).astype(float)
    w = rng.uniform(0.5, 2.0, 3)
    assert T.grad_check(scalarize(lambda v: T.bce_with_logits(v, t, w), rng), [z]) < TOL
    out = T.bce_with_logits(z, t, w).data
    ref = np.array([[w[j] * bce_scalar(z.data[i, j], t[i, j]) for j in range(3)] for i in range(4)])
    np.testing.assert_allclose(out, ref, rtol=1e-12)
    big = T.bce_with_logits(Tensor(np.array([800.0, -800.0])), np.array([0.0, 1.0])).data
    np.testing.assert_allclose(big, [800.0, 800.0])


def test_gelu_is_tanh_approximation():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-14)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    p = T.softmax_rows(Tensor(np.array([vals]))).data
    assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    y = x * x + x  # x used three times
    T.backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_accumulates_across_calls(rng):
    x = leaf(rng, 3)
    T.backward(T.tsum(x * 2.0))
    T.backward(T.tsum(x * 3.0))
    np.testing.assert_allclose(x.grad, np.full(3, 5.0))


def test_graph_is_topological(rng):
    a, b = leaf(rng, 2), leaf(rng, 2)
    out = T.tsum(T.exp(a * b) + a)
    g = T.Graph.from_output(out)
    pos = {id(n): k for k, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert {id(x) for x in g.leaves()} == {id(a), id(b)}


def test_backward_requires_scalar(rng):
    with pytest.raises(UsageError):
        T.backward(leaf(rng, 3) * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_raise(rng):
    with pytest.raises(NumericalError):
        T.log(Tensor(np.array([0.0, 1.0])))
    T.set_finite_checks(False)
    assert np.isinf(T.log(Tensor(np.array([0.0]))).data).all()


def test_zero_vector_normalization_is_degenerate():
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(Tensor(np.zeros((2, 3))))


def test_shape_errors(rng):
    with pytest.raises(DimensionError):
        T.slice_channels(leaf(rng, 2, 3), 2, 5)
    with pytest.raises(DimensionError):
        T.pad_rows(leaf(rng, 4, 3), 2)


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with T.no_grad():
        y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_default_dtype_float32_flows_through_ops(rng):
    with T.default_dtype("float32"):
        x = Tensor(rng.standard_normal((2, 3)).tolist())
        assert x.dtype == np.float32 and T.gelu(x).dtype == np.float32
    # float arrays keep their own precision
    assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32
    assert T.get_default_dtype() == np.float64
    with pytest.raises(ConfigError):
        T.set_default_dtype("int32")


def test_grad_check_detects_wrong_gradient(rng):
    x = leaf(rng, 3)

    def bad(v):
        y = T._make(v.data ** 2, (v,), lambda g: (g * v.data,), "bad_square")  # missing factor 2
        return T.tsum(y)

    assert T.grad_check(bad, [x]) > 0.4


def test_grad_check_coordinate_sampling_is_seeded(rng):
    x = leaf(rng, 50)
    f = scalarize(T.tanh, rng)
    assert T.grad_check(f, [x], max_coords=5, seed=3) == T.grad_check(f, [x], max_coords=5, seed=3)
