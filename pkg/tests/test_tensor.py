import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sipe import tensor as T
from sipe.tensor import Tensor

import oracles

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


def numeric_check(fn, *inputs, step=1e-6, tol=1e-4):
    """Compare T.grad of sum(fn(*inputs) * weights) against central differences."""
    rng = np.random.default_rng(0)
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weights = rng.normal(size=out.shape)
    grads = T.grad((out * weights).sum(), tensors)
    for i, x in enumerate(inputs):
        def scalar(v, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = Tensor(v)
            return float((fn(*args).data * weights).sum())

        numeric = oracles.central_difference(scalar, np.asarray(x, dtype=np.float64), step)
        scale = np.maximum(np.maximum(np.abs(grads[i]), np.abs(numeric)), 1e-6)
        assert np.max(np.abs(grads[i] - numeric) / scale) < tol, (i, grads[i], numeric)


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------


def test_elementwise_examples():
    assert T.elementwise("add", [1, 2], [3, 4]).data.tolist() == [4, 6]
    assert T.elementwise("mul", [1, 2], 0).data.tolist() == [0, 0]
    assert T.elementwise("relu", [-1, 2]).data.tolist() == [0, 2]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2,\).*\(3,\)"):
        T.add(Tensor([1, 2]), Tensor([1, 2, 3]))


def test_reduce_examples():
    assert T.reduce("max", Tensor([0.5, 2.0, 1.0])).item() == 2.0
    assert T.reduce("sum", Tensor([[1, 2], [3, 4]]), axis=1).data.tolist() == [3, 7]
    assert T.reduce("mean", Tensor([2, 4])).item() == 3.0


def test_reduce_empty_axis_fails():
    with pytest.raises(T.ShapeError):
        T.reduce("sum", Tensor(np.zeros((2, 0))), axis=1)


def test_max_gradient_goes_to_first_tie():
    x = Tensor([1.0, 3.0, 3.0, 2.0], requires_grad=True)
    (g,) = T.grad(x.max(), [x])
    assert g.tolist() == [0, 1, 0, 0]


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(1, 4, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_window_sum():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
    assert out.data[0, 1, 1] == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(3, 5, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_bilinear_examples():
    assert T.resize_bilinear(Tensor(np.full((2, 3, 5), 7.0)), 6, 4).data.tolist() == np.full((2, 6, 4), 7.0).tolist()
    got = T.resize_bilinear(Tensor([[[0.0, 1.0]]]), 1, 4).data[0, 0]
    assert got.tolist() == [0.0, 0.25, 0.75, 1.0]
    assert got.tolist() == oracles.bilinear_1d([0.0, 1.0], 4)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 3)))
    assert T.resize_bilinear(x, 3, 3) is x


def test_bilinear_matches_1d_oracle_separably():
    row = [0.0, 2.0, -1.0, 5.0]
    got = T.resize_bilinear(Tensor([[row]]), 1, 7).data[0, 0]
    np.testing.assert_allclose(got, oracles.bilinear_1d(row, 7), atol=1e-15)


def test_grad_trivial_examples():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    assert T.grad(p.sum(), [p])[0].tolist() == [1, 1, 1]
    assert T.grad((p * p).sum(), [p])[0].tolist() == [2, -4, 6]


def test_grad_rejects_untracked_parameter():
    p = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        T.grad(Tensor([1.0], requires_grad=True).sum(), [p])


def test_nonfinite_results_are_rejected():
    with pytest.raises(FloatingPointError):
        T.div(Tensor([1.0]), Tensor([0.0]))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_tnsr_layout():
    raw = T.tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert raw[:4] == b"TNSR"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert np.frombuffer(raw[16:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_tnsr_truncated_reports_offset():
    raw = T.tensor_to_bytes(np.zeros((2, 2)))
    with pytest.raises(ValueError, match=r"byte \d+"):
        T.tensor_from_bytes(raw[:-3])
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(b"XXXX" + raw[4:]))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tnsr_round_trip(x):
    back = T.tensor_from_bytes(T.tensor_to_bytes(x))
    assert back.shape == x.shape
    assert np.array_equal(back, x)


# ---------------------------------------------------------------------------
# gradient properties
# ---------------------------------------------------------------------------

settings_fd = settings(max_examples=15, deadline=None)


@settings_fd
@given(arrays((2, 3)), arrays((2, 3)))
def test_binary_op_gradients(a, b):
    numeric_check(T.add, a, b)
    numeric_check(T.sub, a, b)
    numeric_check(T.mul, a, b)
    numeric_check(T.div, a, np.abs(b) + 0.5)


@settings_fd
@given(arrays((3, 4)))
def test_unary_op_gradients(a):
    a = np.where(np.abs(a) < 1e-3, 0.5, a)  # keep away from the kinks of relu and abs
    numeric_check(T.relu, a)
    numeric_check(T.absolute, a)
    numeric_check(T.softplus, a)
    numeric_check(lambda t: T.sqrt(T.absolute(t)), a)
    numeric_check(lambda t: T.l2norm(t, axis=1), a)


@settings_fd
@given(arrays((2, 3, 4)))
def test_reduction_and_shape_gradients(a):
    a = a + np.arange(a.size).reshape(a.shape) * 1e-3  # distinct values, so max is smooth
    numeric_check(lambda t: t.sum(axis=1), a)
    numeric_check(lambda t: t.mean(axis=(0, 2)), a)
    numeric_check(lambda t: t.max(axis=-1), a)
    numeric_check(lambda t: T.transpose(t, (2, 0, 1)).reshape(4, 6), a)
    numeric_check(lambda t: T.concat([t, t * 2.0], axis=1), a)
    numeric_check(lambda t: T.take(t, np.array([2, 0]), axis=1), a)


@settings_fd
@given(arrays((2, 3, 4)), arrays((4, 2)))
def test_matmul_gradient(a, b):
    numeric_check(T.matmul, a, b)


@settings(max_examples=8, deadline=None)
@given(arrays((2, 5, 5)), arrays((3, 2, 3, 3)), st.sampled_from([1, 2]))
def test_conv_gradient(x, w, stride):
    numeric_check(lambda a, b: T.conv2d(a, b, stride=stride, pad=1), x, w)


@settings_fd
@given(arrays((2, 3, 4)), st.integers(1, 7), st.integers(1, 7))
def test_resize_gradient(a, h, w):
    numeric_check(lambda t: T.resize_bilinear(t, h, w), a)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


@given(finite, st.integers(1, 5), st.integers(1, 5), st.integers(1, 9), st.integers(1, 9))
def test_bilinear_preserves_constants(c, h, w, hh, ww):
    out = T.resize_bilinear(Tensor(np.full((1, h, w), c)), hh, ww).data
    assert np.all(out == c)


@given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite), st.integers(1, 12))
def test_bilinear_monotone(profile, size):
    profile = np.sort(profile)
    out = T.resize_bilinear(Tensor(profile.reshape(1, 1, -1)), 1, size).data[0, 0]
    assert np.all(np.diff(out) >= -1e-12)


@settings(max_examples=10, deadline=None)
@given(arrays((2, 4, 6)), arrays((3, 2, 3, 3)))
def test_ops_are_deterministic(x, w):
    a = T.conv2d(Tensor(x), Tensor(w), pad=1)
    b = T.conv2d(Tensor(x), Tensor(w), pad=1)
    assert a.data.tobytes() == b.data.tobytes()
    r1 = T.resize_bilinear(a, 5, 3)
    r2 = T.resize_bilinear(b, 5, 3)
    assert r1.data.tobytes() == r2.data.tobytes()
