import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from polarcheck import tensor as T
from polarcheck.tensor import ShapeError, Tape, Tensor, finite_difference


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).value, [0.5, 0.5])


def test_matmul_by_hand():
    a = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    out = T.matmul(Tensor(a), Tensor([1.0, 2.0, 3.0])).value
    np.testing.assert_array_equal(out, [7.0, -1.0])


def test_tanh_zero():
    assert T.tanh(Tensor(0.0)).value == 0.0


def test_square_sum_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    tape.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(tape.grad(x), [2.0, 4.0])


def test_softmax_pick_matches_finite_difference():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=5)

    def f(v):
        return T.softmax_array(v)[2]

    tape = Tape()
    x = tape.leaf(x0)
    tape.backward(T.take_slice(T.softmax(x), 2))
    assert rel_err(tape.grad(x), finite_difference(f, x0, 1e-5)) < 1e-4


def test_constant_root_gives_zero_gradient():
    tape = Tape()
    x = tape.leaf([1.0, -3.0])
    tape.backward(T.sum(T.scale(x, 0.0)))
    np.testing.assert_array_equal(tape.grad(x), [0.0, 0.0])


def test_unreachable_nodes_absent():
    tape = Tape()
    x = tape.leaf([1.0])
    y = tape.leaf([2.0])
    T.tanh(y)
    grads = tape.backward(T.sum(T.scale(x, 3.0)))
    assert y.node not in grads
    assert x.node in grads


def test_backward_rejects_non_scalar_and_reuse():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        tape.backward(T.tanh(x))
    tape.backward(T.sum(x))
    with pytest.raises(RuntimeError):
        tape.backward(T.sum(x))


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\) vs \(3,\)"):
        T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\) @ \(2, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_finite_difference_trivial():
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_allclose(finite_difference(np.sum, x, 1e-5), np.ones(3), atol=1e-9)
    np.testing.assert_allclose(finite_difference(lambda v: v @ v, [1.0, 2.0], 1e-4), [2.0, 4.0], atol=1e-6)
    with pytest.raises(ValueError):
        finite_difference(np.sum, x, 0.0)


def test_max_routes_ties_to_first_index():
    tape = Tape()
    x = tape.leaf([[1.0, 3.0, 3.0]])
    tape.backward(T.sum(T.max(x, axis=1)))
    np.testing.assert_array_equal(tape.grad(x), [[0.0, 1.0, 0.0]])


def test_record_dispatch_and_unknown_kind():
    out = T.record("softmax", Tensor([1.0, 1.0, 1.0]), axis=-1)
    np.testing.assert_allclose(out.value, np.full(3, 1 / 3))
    with pytest.raises(ValueError):
        T.record("nope", Tensor(1.0))


def test_replay_is_bitwise_identical():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))

    def run():
        tape = Tape()
        y = T.softmax(T.tanh(T.matmul(tape.leaf(a), tape.leaf(b))), axis=-1)
        return y.value.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    s = T.softmax(Tensor(x), axis=-1).value
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0) and np.all(s <= 1)
