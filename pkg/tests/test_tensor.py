import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from beamwalk import tensor as tn


def T(x, grad=True):
    return tn.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def weighted(fn, shape, seed=0):
    r = tn.Tensor(np.random.default_rng(seed).standard_normal(shape), dtype=np.float64)
    return lambda: tn.sum_(tn.mul(fn(), r))


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = tn.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_select():
    out = tn.matmul(T([[1, 0], [0, 0]]), T([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_gradient(rng):
    a, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal((4, 2)))
    assert tn.gradcheck(lambda: tn.sum_(tn.matmul(a, b)), [a, b]) < 1e-5


def test_matmul_shape_error():
    with pytest.raises(tn.ShapeError):
        tn.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = T(rng.standard_normal((2, 1, 5, 5)))
    out = tn.conv2d(x, T(np.ones((1, 1, 1, 1))), T([0.0]))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_kernel_gives_bias(rng):
    x = T(rng.standard_normal((2, 3, 6, 6)))
    out = tn.conv2d(x, T(np.zeros((2, 3, 3, 3))), T([1.5, -2.0]), padding=1)
    np.testing.assert_array_equal(out.data[:, 0], 1.5)
    np.testing.assert_array_equal(out.data[:, 1], -2.0)


def test_conv_gradient(rng):
    x, w, b = T(rng.standard_normal((2, 3, 5, 5))), T(rng.standard_normal((4, 3, 3, 3))), T(rng.standard_normal(4))
    assert tn.gradcheck(weighted(lambda: tn.conv2d(x, w, b, padding=1), (2, 4, 5, 5)), [x, w, b]) < 1e-5


def test_conv_matches_direct_loops(rng):
    x, w, b = rng.standard_normal((1, 2, 5, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = tn.conv2d(T(x), T(w), T(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 4))
    for o in range(3):
        for i in range(5):
            for j in range(4):
                ref[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_rejects_bad_shapes():
    with pytest.raises(tn.ShapeError):
        tn.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))
    with pytest.raises(tn.ConfigurationError):
        tn.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 2, 2))))


# -- maxpool -----------------------------------------------------------------

def test_maxpool_single_window():
    assert tn.maxpool2(T([[[[1, 2], [3, 4]]]])).data.item() == 4


def test_maxpool_ties_route_to_first():
    x = T(np.full((1, 1, 2, 2), 7.0))
    out = tn.maxpool2(x)
    assert out.data.item() == 7.0
    tn.backward(tn.sum_(out))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_gradient(rng):
    x = T(rng.permutation(16).reshape(1, 1, 4, 4) * 0.1)
    assert tn.gradcheck(weighted(lambda: tn.maxpool2(x), (1, 1, 2, 2)), [x]) < 1e-6


def test_maxpool_odd_size_rejected():
    with pytest.raises(tn.ConfigurationError):
        tn.maxpool2(T(np.ones((1, 1, 3, 4))))


# -- bilinear upsample -------------------------------------------------------

def test_upsample_constant():
    out = tn.bilinear_upsample2(T(np.full((1, 2, 3, 5), 2.5)))
    assert out.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(out.data, 2.5)


def test_upsample_single_pixel():
    np.testing.assert_array_equal(tn.bilinear_upsample2(T([[[[3.0]]]])).data, np.full((1, 1, 2, 2), 3.0))


def test_upsample_adjoint(rng):
    x = T(rng.standard_normal((2, 3, 4, 8)))
    y = rng.standard_normal((2, 3, 8, 16))
    out = tn.bilinear_upsample2(x)
    tn.backward(tn.sum_(tn.mul(out, T(y, grad=False))))
    assert abs(np.sum(out.data * y) - np.sum(x.data * x.grad)) < 1e-10


def test_upsample_interior_matches_half_pixel_formula():
    # output pixel 2k+1 sits 3/4 of the way from input k to k+1
    x = np.arange(4.0)
    out = tn.bilinear_upsample2(T(np.tile(x, (1, 1, 1, 1)).reshape(1, 1, 1, 4))).data[0, 0, 0]
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3])


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(tn.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_large_logits_stay_finite():
    out = tn.softmax(T([1e4, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_gradient(rng):
    x = T(rng.standard_normal(5))
    assert tn.gradcheck(weighted(lambda: tn.softmax(x), (5,)), [x]) < 1e-6


@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = tn.softmax(T(x, grad=False), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


# -- elementwise -------------------------------------------------------------

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(tn.relu(T([-1.0, 2.0])).data, [0.0, 2.0])
    assert tn.sigmoid(T([0.0])).data.item() == 0.5


def test_sigmoid_extremes_finite():
    out = tn.sigmoid(T([-800.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_concat_channels():
    out = tn.concat([T(np.ones((1, 2, 3, 3))), T(np.zeros((1, 3, 3, 3)))], axis=1)
    assert out.shape == (1, 5, 3, 3)


def test_concat_mismatch():
    with pytest.raises(tn.ShapeError):
        tn.concat([T(np.ones((1, 2, 3, 3))), T(np.ones((1, 2, 4, 3)))], axis=1)


def test_broadcast_gradients_sum_out(rng):
    a, row = T(rng.standard_normal((3, 4))), T(rng.standard_normal((1, 4)))
    tn.backward(tn.sum_(tn.mul(a, row)))
    np.testing.assert_allclose(row.grad, a.data.sum(0, keepdims=True))


# -- backward ----------------------------------------------------------------

@given(hnp.array_shapes(min_dims=1, max_dims=4, max_side=4))
def test_sum_gradient_is_ones(shape):
    x = T(np.random.default_rng(0).standard_normal(shape))
    tn.backward(tn.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_mse_gradient_closed_form(rng):
    x = T(rng.standard_normal((4, 5)))
    tn.backward(tn.mse(x, T(np.zeros((4, 5)), grad=False)))
    np.testing.assert_allclose(x.grad, 2 * x.data / 20)


def test_shared_subexpression_accumulates():
    x = T([3.0])
    y = tn.mul(x, x)
    tn.backward(tn.sum_(tn.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        tn.backward(tn.scale(T(np.ones(3)), 2.0))


def test_no_grad_builds_no_graph():
    x = T([1.0, 2.0])
    with tn.no_grad():
        y = tn.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = T([1.0])
    y = x
    for _ in range(5000):
        y = tn.scale(y, 1.0)
    tn.backward(tn.sum_(y))
    assert x.grad[0] == 1.0


def test_dtype_switch():
    with tn.default_dtype(np.float32):
        assert tn.Tensor([1.0]).dtype == np.float32
    with tn.default_dtype(np.float64):
        assert tn.Tensor([1.0]).dtype == np.float64


# -- adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    tn.adam_step(p, [np.zeros(2)], {}, lr=0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_lr_sign():
    p = [np.zeros(3)]
    tn.adam_step(p, [np.array([0.5, -3.0, 1e-3])], {}, lr=0.01)
    np.testing.assert_allclose(p[0], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_converges_on_quadratic():
    x = T([5.0])
    opt = tn.Adam([x], lr=1e-2)
    for step in range(2000):
        loss = tn.sum_(tn.square(x))
        opt.zero_grad()
        tn.backward(loss)
        opt.step()
        if abs(x.data[0]) < 1e-3:
            break
    assert abs(x.data[0]) < 1e-3


# -- gradcheck helpers -------------------------------------------------------

def test_gradcheck_detects_wrong_gradient():
    x = T([1.0, 2.0])

    def bad():
        out = tn.sum_(tn.square(x))
        out._backward = lambda g: tn._accum(x, 3.0 * x.data * g)
        return out

    assert tn.gradcheck(bad, [x]) > 0.1


def test_kink_probes_are_skipped():
    x = T([0.0, 1.0])
    stats = tn.gradcheck(lambda: tn.sum_(tn.relu(x)), [x], kink_tol=1e-4, stats=True)
    assert stats.skipped == 1 and stats.max_rel_error < 1e-8
