import math

import numpy as np
import pytest
from scipy import special

from _util import conv2d_bruteforce, leaf
from hscat.engine import (Conv2d, ConvTranspose2d, LayerNorm, Linear, NonFiniteError, Parameter,
                          ShapeError, StaleTapeError, Tensor, backward, no_grad, ops, tape)
from hscat.engine.gradcheck import check_gradients, relative_error

TOL = 1e-4


def gradcheck(f, leaves, step=1e-5):
    errs = check_gradients(f, leaves, step=step)
    assert max(errs) <= TOL, errs


# --- forward oracles ------------------------------------------------------


def test_gelu_matches_erf_form(rng):
    x = rng.standard_normal(50)
    ref = 0.5 * x * (1 + special.erf(x / math.sqrt(2)))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, rtol=1e-12)


def test_softmax_rows_sum_to_one_and_resist_overflow():
    x = Tensor(np.array([[1000.0, 1000.0, 999.0], [-5.0, 0.0, 5.0]]))
    s = ops.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(s))


def test_sum_accumulates_in_double():
    x = Tensor(np.full(10_000_000 // 100, 0.1, dtype=np.float32))
    assert abs(ops.sum(x).item() - 10000.0) < 1e-2


@pytest.mark.parametrize("stride,groups,k", [(1, 1, 3), (2, 1, 3), (1, 4, 3), (1, 2, 5), (2, 1, 1)])
def test_conv2d_matches_bruteforce(rng, stride, groups, k):
    x = rng.standard_normal((2, 7, 6, 4))
    kern = rng.standard_normal((k, k, 4 // groups, 4))
    got = ops.conv2d(Tensor(x), Tensor(kern), stride=stride, groups=groups).data
    np.testing.assert_allclose(got, conv2d_bruteforce(x, kern, stride, groups), atol=1e-10)


def test_conv2d_valid_padding(rng):
    x = rng.standard_normal((1, 6, 6, 2))
    kern = rng.standard_normal((3, 3, 2, 3))
    got = ops.conv2d(Tensor(x), Tensor(kern), padding="valid").data
    assert got.shape == (1, 4, 4, 3)
    np.testing.assert_allclose(got, conv2d_bruteforce(x, kern, padding="valid"), atol=1e-10)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.standard_normal((2, 8, 6, 3))
    kern = rng.standard_normal((3, 3, 3, 5))
    y = rng.standard_normal((2, 4, 3, 5))
    lhs = np.sum(ops.conv2d(Tensor(x), Tensor(kern), stride=2).data * y)
    rhs = np.sum(x * ops.conv_transpose2d(Tensor(y), Tensor(kern), stride=2).data)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_conv_transpose_out_size_pins_odd_extent(rng):
    y = Tensor(rng.standard_normal((1, 2, 2, 3)))
    out = ops.conv_transpose2d(y, Tensor(rng.standard_normal((3, 3, 4, 3))), stride=2, out_size=(3, 4))
    assert out.shape == (1, 3, 4, 4)
    with pytest.raises(ShapeError):
        ops.conv_transpose2d(y, Tensor(rng.standard_normal((3, 3, 4, 3))), stride=2, out_size=(6, 4))


def test_layer_norm_statistics(rng):
    x = Tensor(rng.standard_normal((3, 4, 4, 8)) * 5 + 2)
    out = ops.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)


def test_window_partition_roundtrip(rng):
    x = Tensor(rng.standard_normal((2, 8, 12, 3)))
    t = ops.window_partition(x, 4)
    assert t.shape == (2 * 6, 16, 3)
    # first window holds the top-left 4x4 block in row-major order
    np.testing.assert_array_equal(t.data[0], x.data[0, :4, :4].reshape(16, 3))
    np.testing.assert_array_equal(ops.window_merge(t, 4, 8, 12).data, x.data)


def test_windowed_pool_equals_block_means(rng):
    x = rng.standard_normal((1, 4, 6, 2))
    got = ops.global_avg_pool(Tensor(x), 2).data
    assert got.shape == (1, 2, 3, 2)
    np.testing.assert_allclose(got[0, 1, 2], x[0, 2:4, 4:6].mean(axis=(0, 1)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# --- per-op gradient checks (float64, central differences) ----------------

UNARY = {
    "exp": lambda a: ops.exp(a),
    "log": lambda a: ops.log(ops.add(ops.square(a), 1.0)),
    "relu": lambda a: ops.relu(a),
    "gelu": lambda a: ops.gelu(a),
    "sigmoid": lambda a: ops.sigmoid(a),
    "softplus": lambda a: ops.softplus(a),
    "normal_cdf": lambda a: ops.normal_cdf(a),
    "square": lambda a: ops.square(a),
    "absolute": lambda a: ops.absolute(a),
    "scale": lambda a: ops.scale(a, -2.5),
    "maximum": lambda a: ops.maximum(a, 0.1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    a = leaf(rng, 3, 4)
    if name in ("relu", "absolute", "maximum"):
        # keep probes away from the kinks
        a.data = np.where(np.abs(a.data - 0.1) < 0.05, a.data + 0.2, a.data)
        a.data = np.where(np.abs(a.data) < 0.05, a.data + 0.2, a.data)
    w = rng.standard_normal((3, 4))
    gradcheck(lambda: ops.mul(UNARY[name](a), Tensor(w)), [a])


@pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul, ops.div])
def test_binary_broadcast_gradients(rng, op):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 1, 4, shift=3.0)
    gradcheck(lambda: op(a, b), [a, b])


def test_softmax_gradient(rng):
    a = leaf(rng, 2, 5)
    w = rng.standard_normal((2, 5))
    gradcheck(lambda: ops.mul(ops.softmax(a, axis=-1), Tensor(w)), [a])


def test_shape_op_gradients(rng):
    a = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((4, 3, 2))
    gradcheck(lambda: ops.mul(ops.transpose(a, (2, 1, 0)), Tensor(w)), [a])
    gradcheck(lambda: ops.mul(ops.reshape(a, (6, 4)), Tensor(w.reshape(6, 4))), [a])
    b = leaf(rng, 1, 4)
    gradcheck(lambda: ops.mul(ops.broadcast_to(b, (3, 4)), Tensor(w.reshape(6, 4)[:3])), [b])


def test_reduction_gradients(rng):
    a = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((2, 4))
    gradcheck(lambda: ops.mul(ops.sum(a, axis=1), Tensor(w)), [a])
    gradcheck(lambda: ops.mul(ops.mean(a, axis=1), Tensor(w)), [a])
    gradcheck(lambda: ops.square(ops.mean(a)), [a])


def test_split_concat_gradients(rng):
    a = leaf(rng, 2, 6)
    b = leaf(rng, 2, 2)
    w = rng.standard_normal((2, 8))

    def f():
        p, q = ops.split(a, [2, 4])
        return ops.mul(ops.concat([q, ops.square(p), b], axis=-1), Tensor(w))
    gradcheck(f, [a, b])


def test_matmul_and_linear_gradients(rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 2, 4, 5)
    gradcheck(lambda: ops.square(ops.matmul(a, b)), [a, b])
    w, bias = leaf(rng, 4, 3), leaf(rng, 3)
    gradcheck(lambda: ops.square(ops.linear(a, w, bias)), [a, w, bias])


@pytest.mark.parametrize("stride,groups,k", [(1, 1, 3), (2, 1, 3), (1, 4, 3), (1, 2, 5)])
def test_conv2d_gradients(rng, stride, groups, k):
    x = leaf(rng, 2, 6, 5, 4)
    kern = leaf(rng, k, k, 4 // groups, 4, scale=0.5)
    w = rng.standard_normal(ops.conv2d(Tensor(x.data), Tensor(kern.data), stride, groups).shape)
    gradcheck(lambda: ops.mul(ops.conv2d(x, kern, stride=stride, groups=groups), Tensor(w)), [x, kern])


def test_conv_transpose_gradients(rng):
    y = leaf(rng, 1, 3, 2, 4)
    kern = leaf(rng, 3, 3, 2, 4, scale=0.5)
    w = rng.standard_normal((1, 5, 4, 2))
    gradcheck(lambda: ops.mul(ops.conv_transpose2d(y, kern, 2, out_size=(5, 4)), Tensor(w)), [y, kern])


def test_pool_and_norm_gradients(rng):
    x = leaf(rng, 2, 4, 4, 6)
    w = rng.standard_normal((2, 2, 2, 6))
    gradcheck(lambda: ops.mul(ops.global_avg_pool(x, 2), Tensor(w)), [x])
    gradcheck(lambda: ops.square(ops.global_avg_pool(x)), [x])
    gain, bias = leaf(rng, 6), leaf(rng, 6)
    w2 = rng.standard_normal((2, 4, 4, 6))
    gradcheck(lambda: ops.mul(ops.layer_norm(x, gain, bias), Tensor(w2)), [x, gain, bias])


def test_window_gradients(rng):
    x = leaf(rng, 1, 4, 4, 2)
    w = rng.standard_normal((4, 4, 2))
    gradcheck(lambda: ops.mul(ops.window_partition(x, 2), Tensor(w)), [x])


def test_layer_gradients(rng):
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    for layer in (Linear(4, 3, rng), Conv2d(4, 6, 3, rng, stride=2), ConvTranspose2d(4, 2, 3, rng),
                  LayerNorm(4), Conv2d(4, 4, 5, rng, groups=4)):
        layer.to(np.float64)
        xx = Tensor(x.data.astype(np.float64))
        gradcheck(lambda: ops.square(layer(xx)), layer.parameters())


# --- tape semantics -------------------------------------------------------


def test_tape_is_reverse_topological(rng):
    a = leaf(rng, 3)
    b = ops.exp(a)
    c = ops.mul(b, a)
    loss = ops.sum(c)
    order = tape(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    for t in order:
        for p in t._parents:
            if id(p) in pos:
                assert pos[id(t)] < pos[id(p)]


def test_shared_subexpression_accumulates(rng):
    a = leaf(rng, 4)
    loss = ops.sum(ops.add(ops.mul(a, a), a))
    backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_second_backward_is_stale(rng):
    a = leaf(rng, 3)
    loss = ops.sum(ops.square(a))
    backward(loss)
    with pytest.raises(StaleTapeError):
        backward(loss)


def test_backward_requires_scalar(rng):
    with pytest.raises(ValueError, match="scalar"):
        backward(ops.square(leaf(rng, 3)))


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor(np.array([0.0])))


def test_no_grad_builds_no_graph(rng):
    a = leaf(rng, 3)
    with no_grad():
        out = ops.exp(a)
    assert not out.requires_grad and not out._parents


def test_parameter_assign_checks_shape():
    p = Parameter(np.zeros(3), name="w")
    with pytest.raises(ValueError):
        p.assign(np.zeros(4))


def test_relative_error_is_symmetric():
    a, b = np.array([1.0, 2.0]), np.array([1.0, 2.1])
    assert relative_error(a, b) == pytest.approx(relative_error(b, a))
