import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmma.errors import DimensionError
from cmma.numerics import (avg_pool, conv1x1, conv3x3, downsample, elementwise_max,
                           finite_diff_check, global_softmax, load_tensor, read_tensor, relu,
                           save_tensor, write_tensor)


def conv1x1_loop(x, w, b):
    d_out, d_in = w.shape
    _, h, wd = x.shape
    out = np.zeros((d_out, h, wd))
    for d in range(d_out):
        for i in range(h):
            for j in range(wd):
                out[d, i, j] = sum(w[d, c] * x[c, i, j] for c in range(d_in)) + b[d]
    return out


def conv3x3_loop(x, w, b):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for s in range(n):
        for d in range(w.shape[0]):
            for i in range(h):
                for j in range(wd):
                    out[s, d, i, j] = (xp[s, :, i:i + 3, j:j + 3] * w[d]).sum() + b[d]
    return out


def linear_functional_check(make, x, rng, which=0):
    """Gradcheck f(x) = <c, op(x)> for a random fixed c, differentiating input ``which``."""
    c = rng.standard_normal(make(x).output.shape)

    def f(z):
        return float((c * make(z).output).sum())

    def grad(z):
        return make(z).backward(c)[which]

    return finite_diff_check(f, x, 1e-5, grad=grad)


# --- conv1x1 -----------------------------------------------------------------

def test_conv1x1_identity_weight():
    x = np.random.default_rng(0).standard_normal((5, 3, 2))
    out = conv1x1(x, np.eye(5), np.zeros(5)).output
    np.testing.assert_array_equal(out, x)


def test_conv1x1_zero_weight_gives_bias():
    x = np.random.default_rng(1).standard_normal((3, 4, 2))
    b = np.array([1.5, -2.0])
    out = conv1x1(x, np.zeros((2, 3)), b).output
    assert np.all(out[0] == 1.5) and np.all(out[1] == -2.0)


def test_conv1x1_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 2, 2)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(conv1x1(x, w, b).output, conv1x1_loop(x, w, b), atol=1e-12, rtol=0)


def test_conv1x1_batched_leading_axes():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 3, 3, 2, 2)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    out = conv1x1(x, w, b).output
    assert out.shape == (2, 3, 4, 2, 2)
    np.testing.assert_allclose(out[1, 2], conv1x1_loop(x[1, 2], w, b), atol=1e-12)


def test_conv1x1_shape_mismatch_names_axes():
    with pytest.raises(DimensionError, match="axis"):
        conv1x1(np.zeros((3, 2, 2)), np.zeros((4, 5)), np.zeros(4))


def test_conv1x1_is_linear_in_x():
    rng = np.random.default_rng(4)
    w, b = rng.standard_normal((4, 3)), np.zeros(4)
    x, y = rng.standard_normal((3, 2, 5)), rng.standard_normal((3, 2, 5))
    a, c = 1.7, -0.4
    lhs = conv1x1(a * x + c * y, w, b).output
    rhs = a * conv1x1(x, w, b).output + c * conv1x1(y, w, b).output
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.parametrize("which", [0, 1, 2])
def test_conv1x1_gradients(which):
    rng = np.random.default_rng(5)
    for _ in range(10):
        args = [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((4, 3)), rng.standard_normal(4)]

        def make(z, args=args):
            a = list(args)
            a[which] = z
            return conv1x1(*a)

        assert linear_functional_check(make, args[which], rng, which) < 1e-4


# --- relu --------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])).output, [0, 0, 2])


def test_relu_positive_identity_and_zero_subgradient():
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(relu(x).output, x)
    (g,) = relu(np.array([-1.0, 0.0, 1.0])).backward(np.ones(3))
    np.testing.assert_array_equal(g, [0, 0, 1])


def test_relu_matches_elementwise_oracle_and_gradcheck():
    rng = np.random.default_rng(6)
    for _ in range(10):
        x = rng.standard_normal(20)
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        np.testing.assert_array_equal(relu(x).output, np.array([max(v, 0.0) for v in x]))
        assert linear_functional_check(relu, x, rng) < 1e-4


# --- global softmax ----------------------------------------------------------

def test_softmax_constant_grid():
    np.testing.assert_allclose(global_softmax(np.full((8, 4), 3.3)).output, 1 / 32, rtol=1e-14)


def test_softmax_dominant_entry():
    r = np.zeros((4, 4))
    r[2, 1] = 50
    assert global_softmax(r).output[2, 1] > 0.999


def test_softmax_oracle_and_shift_invariance():
    rng = np.random.default_rng(7)
    r = rng.standard_normal((4, 4))
    direct = np.exp(r) / np.exp(r).sum()
    out = global_softmax(r).output
    np.testing.assert_allclose(out, direct, atol=1e-12, rtol=0)
    np.testing.assert_allclose(global_softmax(r + 123.4).output, out, atol=1e-12, rtol=0)


def test_softmax_large_inputs_stay_finite():
    out = global_softmax(np.array([[1000.0, 999.0], [0.0, -1000.0]])).output
    assert np.all(np.isfinite(out)) and abs(out.sum() - 1) < 1e-12


def test_softmax_gradcheck():
    rng = np.random.default_rng(8)
    for _ in range(10):
        assert linear_functional_check(global_softmax, rng.standard_normal((3, 4, 2)), rng) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_is_distribution_and_shift_invariant(r, c):
    a = global_softmax(r).output
    assert np.all(a >= 0)
    assert abs(a.sum() - 1) < 1e-6
    np.testing.assert_allclose(global_softmax(r + c).output, a, atol=1e-12)


# --- elementwise max ---------------------------------------------------------

def test_max_single_input_is_identity():
    x = np.random.default_rng(9).standard_normal((2, 3))
    np.testing.assert_array_equal(elementwise_max([x]).output, x)


def test_max_ties_route_to_lowest_index():
    x = np.ones((2, 2))
    rec = elementwise_max([x, x.copy(), x.copy()])
    np.testing.assert_array_equal(rec.output, x)
    (g,) = rec.backward(np.full((2, 2), 5.0))
    np.testing.assert_array_equal(g[0], 5.0)
    np.testing.assert_array_equal(g[1:], 0.0)


def test_max_empty_raises():
    with pytest.raises(ValueError):
        elementwise_max([])


def test_max_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        elementwise_max([np.zeros(2), np.zeros(3)])


def test_max_gradcheck_tie_free():
    rng = np.random.default_rng(10)
    for _ in range(10):
        xs = rng.standard_normal((3, 4, 2))
        assert linear_functional_check(lambda z: elementwise_max(z), xs, rng) < 1e-6


# --- average pooling ---------------------------------------------------------

def test_avg_pool_constant():
    assert avg_pool(np.full((3, 4), 2.5), (0, 1)).output == pytest.approx(2.5)


def test_avg_pool_hand_value():
    assert avg_pool(np.array([[1.0, 3.0], [5.0, 7.0]]), (0, 1)).output == 4.0


def test_avg_pool_column_mean_oracle():
    x = np.random.default_rng(11).standard_normal((6, 5))
    oracle = np.array([sum(x[:, j]) / 6 for j in range(5)])
    np.testing.assert_allclose(avg_pool(x, 0).output, oracle, atol=1e-12)


def test_avg_pool_invalid_axis():
    with pytest.raises(ValueError):
        avg_pool(np.zeros((2, 2)), 2)


def test_avg_pool_gradcheck():
    rng = np.random.default_rng(12)
    for _ in range(10):
        assert linear_functional_check(lambda z: avg_pool(z, (0, 2)), rng.standard_normal((3, 2, 4)), rng) < 1e-4


# --- backbone primitives -----------------------------------------------------

def test_conv3x3_matches_loop_oracle():
    rng = np.random.default_rng(13)
    x, w, b = rng.standard_normal((2, 3, 4, 3)), rng.standard_normal((5, 3, 3, 3)), rng.standard_normal(5)
    np.testing.assert_allclose(conv3x3(x, w, b).output, conv3x3_loop(x, w, b), atol=1e-12)


@pytest.mark.parametrize("which", [0, 1, 2])
def test_conv3x3_gradients(which):
    rng = np.random.default_rng(14)
    for _ in range(3):
        args = [rng.standard_normal((2, 2, 4, 3)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]

        def make(z, args=args):
            a = list(args)
            a[which] = z
            return conv3x3(*a)

        assert linear_functional_check(make, args[which], rng, which) < 1e-4


def test_downsample_values_and_gradcheck():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(downsample(x, 2).output[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    rng = np.random.default_rng(15)
    assert linear_functional_check(lambda z: downsample(z, 2), rng.standard_normal((2, 3, 4, 6)), rng) < 1e-4
    with pytest.raises(DimensionError):
        downsample(np.zeros((1, 1, 3, 4)), 2)


# --- finite-difference checker -----------------------------------------------

def test_fd_sum_of_squares():
    x0 = np.random.default_rng(16).standard_normal(7)
    err = finite_diff_check(lambda x: ((x ** 2).sum(), 2 * x), x0, 1e-5)
    assert err < 1e-8


def test_fd_constant_function():
    assert finite_diff_check(lambda x: (3.0, np.zeros_like(x)), np.ones(4), 1e-5) == 0.0


def test_fd_softmax_linear_functional():
    rng = np.random.default_rng(17)
    c = rng.standard_normal((3, 3))

    def f(r):
        rec = global_softmax(r)
        return float((c * rec.output).sum()), rec.backward(c)[0]

    assert finite_diff_check(f, rng.standard_normal((3, 3)), 1e-5) < 1e-6


def test_fd_detects_wrong_gradient():
    assert finite_diff_check(lambda x: ((x ** 2).sum(), x), np.ones(3), 1e-5) > 0.4


def test_fd_rejects_non_scalar():
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: (x, np.ones_like(x)), np.ones(3), 1e-5)
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: x, np.ones(3), 1e-5, grad=lambda x: x)


# --- tensor container --------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_tensor_roundtrip(tmp_path, dtype):
    x = np.random.default_rng(18).standard_normal((2, 3, 4)).astype(dtype)
    save_tensor(tmp_path / "t.cmmt", x)
    y = load_tensor(tmp_path / "t.cmmt")
    assert y.dtype == dtype
    np.testing.assert_array_equal(x, y)


def test_tensor_header_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"CMMT"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<2Q", raw[12:28]) == (1, 3)
    assert raw[28] == 1
    assert np.frombuffer(raw[29:], "<f4").tolist() == [1.0, 2.0, 3.0]
    buf.seek(0)
    np.testing.assert_array_equal(read_tensor(buf), [[1, 2, 3]])


def test_tensor_bad_magic():
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(b"XXXX" + bytes(20)))
