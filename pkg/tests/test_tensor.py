import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from beatkit import tensor as tn
from beatkit.checkpoint import CheckpointError, dumps, loads
from beatkit.tensor import Tensor

from helpers import check_grads

small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
               elements=st.floats(-1, 1, allow_nan=False))


# matmul --------------------------------------------------------------------

def test_matmul_identity():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(M)).data, M)


def test_matmul_hand_expansion():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(tn.ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_grad_fd():
    rng = np.random.default_rng(0)
    A, B = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    assert check_grads(lambda a, b: tn.tsum(a @ b), [A, B]) < 1e-6


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(1)
    A, B = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 2))
    assert check_grads(lambda a, b: tn.tsum((a @ b) * (a @ b)), [A, B]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (rng.uniform(-1, 1, (3, 3)) for _ in range(3))
    left = ((Tensor(A) @ Tensor(B)) @ Tensor(C)).data
    right = (Tensor(A) @ (Tensor(B) @ Tensor(C))).data
    np.testing.assert_allclose(left, right, atol=1e-9)


# softmax ---------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(tn.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_masked_entry_is_exact_zero():
    out = tn.softmax_lastdim(tn.masked_fill(Tensor([5.0, 0.0]), np.array([True, False]), -np.inf))
    assert out.data[0] == 0.0 and out.data[1] == 1.0


def test_softmax_direct_evaluation():
    e = np.exp([1.0, 2.0, 3.0])
    out = tn.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, e / e.sum(), rtol=1e-12)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_fully_masked_slice():
    x = tn.masked_fill(Tensor([1.0, 2.0]), np.array([True, True]), -np.inf)
    with pytest.raises(tn.DegenerateSliceError):
        tn.softmax_lastdim(x)


@settings(max_examples=50, deadline=None)
@given(small, st.floats(-50, 50))
def test_softmax_rows_and_shift(x, c):
    out = tn.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
    assert (out >= 0).all()
    np.testing.assert_allclose(tn.softmax_lastdim(Tensor(x + c)).data, out, atol=1e-12)


def test_softmax_grad_fd():
    rng = np.random.default_rng(2)
    x, w = rng.uniform(-1, 1, (3, 5)), rng.uniform(-1, 1, (3, 5))
    assert check_grads(lambda a: tn.tsum(tn.softmax_lastdim(a) * w), [x]) < 1e-6


# layer norm ------------------------------------------------------------------

def test_layer_norm_constant_is_zero():
    out = tn.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_layer_norm_two_values():
    out = tn.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_moments():
    x = np.random.default_rng(3).normal(2, 5, (6, 16))
    out = tn.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-5)


def test_layer_norm_grad_fd():
    rng = np.random.default_rng(4)
    x, g, b, w = (rng.uniform(-1, 1, s) for s in ((3, 6), (6,), (6,), (3, 6)))
    assert check_grads(lambda x_, g_, b_: tn.tsum(tn.layer_norm(x_, g_, b_) * w), [x, g, b]) < 1e-5


def test_layer_norm_bad_gain():
    with pytest.raises(tn.ShapeError):
        tn.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


# backward --------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tn.backward(tn.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x():
    x0 = np.array([1.0, -2.0, 0.5])
    x = Tensor(x0, requires_grad=True)
    tn.backward(tn.tsum(x * x))
    np.testing.assert_array_equal(x.grad, 2 * x0)


def test_backward_non_scalar_is_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(tn.ContractError):
        tn.backward(x * 2.0)
    assert len(tn.current_tape()) == 0


def test_tape_cleared_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = tn.tsum(tn.exp(x))
    assert len(tn.current_tape()) > 0
    tn.backward(loss)
    assert len(tn.current_tape()) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with tn.no_grad():
        y = tn.tsum(x * x)
    assert len(tn.current_tape()) == 0 and not y.requires_grad


def test_non_finite_output_is_error():
    with pytest.raises(tn.NonFiniteError):
        tn.log(Tensor([0.0]))


# pad -------------------------------------------------------------------------

def test_pad_axis_values():
    np.testing.assert_array_equal(tn.pad_axis(Tensor([1.0, 2.0, 3.0]), 0, 1, 2, 0.0).data,
                                  [0, 1, 2, 3, 0, 0])


def test_pad_axis_zero_is_identity():
    x = np.random.default_rng(5).normal(size=(4, 3))
    np.testing.assert_array_equal(tn.pad_axis(Tensor(x), 0, 0, 0).data, x)


def test_pad_axis_shape_audit():
    assert tn.pad_axis(Tensor(np.zeros((100, 4))), 0, 8, 8).shape == (116, 4)


def test_pad_axis_grad_fd():
    x = np.random.default_rng(6).uniform(-1, 1, (4, 3))
    w = np.random.default_rng(7).uniform(-1, 1, (4, 7))
    assert check_grads(lambda a: tn.tsum(tn.pad_axis(a, 1, 1, 3, 0.5) * w), [x]) < 1e-6


@pytest.mark.parametrize("width,step", [(1, 1), (5, 1), (5, 3), (2, 4)])
def test_dilated_windows_matches_slices(width, step):
    x = np.random.default_rng(8).normal(size=(2, 30, 3))
    T = 30 - (width - 1) * step
    want = np.stack([x[:, k * step:k * step + T] for k in range(width)], axis=-2)
    np.testing.assert_array_equal(tn.dilated_windows(Tensor(x), width, step, T).data, want)


def test_dilated_windows_grad_fd():
    x = np.random.default_rng(9).uniform(-1, 1, (2, 14, 3))
    w = np.random.default_rng(10).uniform(-1, 1, (2, 8, 4, 3))
    assert check_grads(lambda a: tn.tsum(tn.dilated_windows(a, 4, 2, 8) * w), [x]) < 1e-6


def test_dilated_windows_rejects_short_input():
    with pytest.raises(tn.ShapeError):
        tn.dilated_windows(Tensor(np.zeros((5, 2))), 3, 2, 2)


# every differentiable op against finite differences --------------------------

UNARY = {
    "exp": tn.exp,
    "log": lambda a: tn.log(a * a + 1.0),
    "sigmoid": tn.sigmoid,
    "elu": tn.elu,
    "gelu": tn.gelu,
    "relu": lambda a: tn.relu(a + 0.05),
    "power": lambda a: tn.power(a * a + 1.0, 1.5),
    "div": lambda a: 1.0 / (a * a + 1.0),
    "neg": tn.neg,
    "clip": lambda a: tn.clip(a, -0.5, 0.5),
    "mean": lambda a: tn.mean(a, axis=0, keepdims=True),
    "transpose": tn.transpose,
    "swapaxes": lambda a: tn.swapaxes(a, 0, 1),
    "reshape": lambda a: tn.reshape(a, (-1,)),
    "getitem": lambda a: a[1:, ::2],
    "concat": lambda a: tn.concat([a, a * 2.0], axis=1),
    "stack": lambda a: tn.stack([a, tn.exp(a)], axis=0),
    "max_pool": lambda a: tn.max_pool(a, 2, axis=1),
    "masked_fill": lambda a: tn.masked_fill(a, np.eye(4, 6, dtype=bool), 0.3),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_grad_fd(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.uniform(-1, 1, (4, 6))
    # keep clip and relu away from their kinks
    if name in ("clip", "relu"):
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.1, x)
        x = np.where(np.abs(x + 0.05) < 0.05, x + 0.2, x)
    w = rng.uniform(-1, 1, UNARY[name](Tensor(x)).shape)
    assert check_grads(lambda a: tn.tsum(UNARY[name](a) * w), [x]) < 1e-4


def test_conv2d_grad_fd():
    rng = np.random.default_rng(8)
    x, w, b = rng.uniform(-1, 1, (2, 5, 4, 2)), rng.uniform(-1, 1, (3, 3, 2, 3)), rng.uniform(-1, 1, 3)
    probe = rng.uniform(-1, 1, (2, 5, 4, 3))
    assert check_grads(lambda x_, w_, b_: tn.tsum(tn.conv2d_same(x_, w_, b_) * probe), [x, w, b]) < 1e-6


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(9)
    x, w, b = rng.normal(size=(1, 4, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    want = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            want[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(tn.conv2d_same(Tensor(x), Tensor(w), Tensor(b)).data, want, atol=1e-12)


def test_dropout_identity_without_rng_and_scaled_with():
    x = Tensor(np.ones(1000))
    assert tn.dropout(x, 0.5, None) is x or np.array_equal(tn.dropout(x, 0.5, None).data, x.data)
    out = tn.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.1


# checkpoint ------------------------------------------------------------------

def test_checkpoint_round_trip_and_determinism():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array([1.5]), "ü": np.zeros((1, 2, 1))}
    blob = dumps(arrays)
    assert blob[:4] == b"BTCK" and blob == dumps(arrays)
    back = loads(blob)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        loads(b"XXXX" + bytes(8))
    with pytest.raises(CheckpointError):
        loads(dumps({"a": np.ones(4)})[:-3])


def test_masked_fill_rejects_nan_and_posinf():
    for v in (np.nan, np.inf):
        with pytest.raises(tn.NonFiniteError):
            tn.masked_fill(Tensor([1.0, 2.0]), np.array([True, False]), v)
