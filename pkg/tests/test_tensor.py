import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from freqforce import tensor as T
from freqforce.tensor import ShapeError, Tensor


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_ops_broadcast_and_gradients(op, rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, positive=True)
    out = T.elementwise(op, a, b)
    assert out.shape == (3, 4)
    assert T.grad_check(lambda: (T.elementwise(op, a, b) ** 2).sum(), [a, b]) < 1e-6


@pytest.mark.parametrize("op", ["sigmoid", "gelu", "square"])
def test_unary_ops_gradients(op, rng):
    a = leaf(rng, 2, 5)
    assert T.grad_check(lambda: (T.elementwise(op, a) * T.elementwise(op, a)).sum(), [a]) < 1e-4


def test_abs_gradient_away_from_zero(rng):
    a = Tensor(rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.1, 1.0, size=(4, 3)), requires_grad=True)
    assert T.grad_check(lambda: T.elementwise("abs", a).sum(), [a]) < 1e-6


def test_abs_deadzone_is_flat_near_zero():
    a = Tensor(np.array([1e-14, -1e-14, 0.5]), requires_grad=True)
    T.tabs(a, deadzone=1e-12).sum().backward()
    np.testing.assert_array_equal(a.grad, [0.0, 0.0, 1.0])


def test_elementwise_rejects_unknown_op():
    with pytest.raises(ValueError):
        T.elementwise("tanh", Tensor(np.ones(2)))


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0])))
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-15)


def test_matmul_batched_and_shared_weight_gradients(rng):
    a = leaf(rng, 2, 3, 4)
    w = leaf(rng, 4, 5)
    b = leaf(rng, 2, 4, 5)
    assert T.grad_check(lambda: (T.matmul(a, w) ** 2).sum(), [a, w]) < 1e-6
    assert T.grad_check(lambda: (T.matmul(a, b) ** 2).sum(), [a, b]) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_reductions_reshape_transpose_concat_getitem(rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 2, 1, 4)
    fns = [
        lambda: (T.mean(a, axis=1) ** 2).sum(),
        lambda: (T.tsum(a, axis=(0, 2), keepdims=True) ** 2).sum(),
        lambda: (a.reshape(6, 4).transpose(1, 0) ** 2 * np.arange(6.0)).sum(),
        lambda: (T.concat([a, b], axis=1) ** 2).sum(),
        lambda: (a[:, 1:, ::2] ** 2).sum(),
        lambda: (a[np.array([0, 0, 1])] ** 2).sum(),
    ]
    for fn in fns:
        assert T.grad_check(fn, [a, b]) < 1e-6


def test_softmax_and_layer_norm_gradients(rng):
    a = leaf(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    assert T.grad_check(lambda: (T.softmax(a) * w).sum(), [a]) < 1e-6
    assert T.grad_check(lambda: (T.layer_norm(a, 1e-6) * w).sum(), [a]) < 1e-5


def test_softmax_rows_sum_to_one_with_masked_entries():
    logits = np.array([[0.0, -np.inf, 1.0], [2.0, 2.0, -np.inf]])
    out = T.softmax(Tensor(logits)).data
    np.testing.assert_allclose(out.sum(-1), 1.0)
    assert out[0, 1] == 0.0 and out[1, 2] == 0.0


def test_shared_subexpression_accumulates_once_per_path():
    # d/dx of (x*x + x) at x=3 is 2x + 1 = 7; a diamond graph must not double count
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (y + y * 0.0 + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_backward_visits_each_node_once():
    calls = []
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.exp(x)
    inner = y._backward

    def counted(g):
        calls.append(1)
        return inner(g)

    y._backward = counted
    (y + y + y).sum().backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, 3 * np.e)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.sum().backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_grad_matches_value_shape(rng):
    a = leaf(rng, 2, 3)
    (a * a).sum().backward()
    assert a.grad.shape == a.data.shape


# -- stride-2 depthwise convolution --------------------------------------------------------


@pytest.mark.parametrize("padding", ["zero", "reflect", "periodic"])
@pytest.mark.parametrize("shape", [(2, 8, 8), (1, 4, 12), (3, 10, 6)])
def test_conv_transpose_is_the_exact_adjoint(padding, shape, rng):
    x = rng.normal(size=shape)
    k = rng.normal(size=(shape[0], 4, 4))
    y = T.conv2d_depthwise_stride2(Tensor(x), Tensor(k), padding).data
    c = rng.normal(size=y.shape)
    back = T.conv2d_transpose_depthwise_stride2(Tensor(c), Tensor(k), padding, shape[-2:]).data
    assert np.vdot(y, c) == pytest.approx(np.vdot(x, back), rel=1e-12, abs=1e-12)


def test_conv_transpose_on_odd_extents_inverts_the_odd_extension(rng):
    # analysis reflects one extra sample; synthesis rebuilds the even signal and crops it
    x = rng.normal(size=(1, 7, 9))
    s = 1 / np.sqrt(2)
    kernels = [np.outer(a, b)[None] for a in ([s, s], [s, -s]) for b in ([s, s], [s, -s])]
    rec = sum(T.conv2d_transpose_depthwise_stride2(T.conv2d_depthwise_stride2(Tensor(x), Tensor(k)), Tensor(k),
                                                   out_size=(7, 9)).data for k in kernels)
    np.testing.assert_allclose(rec, x, atol=1e-12)


def test_conv_matches_direct_loop_oracle(rng):
    x = rng.normal(size=(2, 6, 6))
    k = rng.normal(size=(2, 2, 2))
    y = T.conv2d_depthwise_stride2(Tensor(x), Tensor(k), "zero").data
    ref = np.zeros((2, 3, 3))
    for ch in range(2):
        for i in range(3):
            for j in range(3):
                ref[ch, i, j] = np.sum(x[ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2] * k[ch])
    np.testing.assert_allclose(y, ref, atol=1e-14)


@pytest.mark.parametrize("padding", ["zero", "reflect", "periodic"])
def test_conv_and_transpose_gradients(padding, rng):
    x = leaf(rng, 2, 6, 6)
    k = leaf(rng, 2, 4, 4)
    c = leaf(rng, 2, 3, 3)
    assert T.grad_check(lambda: (T.conv2d_depthwise_stride2(x, k, padding) ** 2).sum(), [x, k]) < 1e-4
    assert T.grad_check(lambda: (T.conv2d_transpose_depthwise_stride2(c, k, padding, (6, 6)) ** 2).sum(),
                        [c, k]) < 1e-4


def test_conv_rejects_bad_kernel_and_padding():
    x = Tensor(np.ones((1, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d_depthwise_stride2(x, Tensor(np.ones((1, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d_depthwise_stride2(x, Tensor(np.ones((1, 2, 2))), "circular")


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 9), st.integers(2, 9)),
                  elements=st.floats(-10, 10)))
def test_conv_output_extent_is_ceil_half(x):
    y = T.conv2d_depthwise_stride2(Tensor(x), Tensor(np.ones((1, 2, 2))), "periodic")
    assert y.shape == (x.shape[0], (x.shape[1] + 1) // 2, (x.shape[2] + 1) // 2)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_tensor_shape_invariant(shape):
    t = Tensor(np.zeros(shape))
    assert int(np.prod(t.shape)) == t.data.size and all(e >= 1 for e in t.shape)
