import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wpnmt import numerics as nx
from wpnmt.numerics import DimensionError, Tape, Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_matmul_identity():
    a = t64(np.eye(2))
    b = t64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_arithmetic():
    out = nx.matmul(t64([[1, 2]]), t64([[3], [4]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    a = t64([[1.0, 1.0]])
    b = t64([[2.0], [5.0]])
    with Tape() as tape:
        a.requires_grad = True
        loss = nx.sum_all(nx.matmul(a, b))
    nx.backward(loss, tape)
    fd = nx.central_difference(lambda: float(nx.sum_all(nx.matmul(a, b)).data), a.data, 1e-5)
    np.testing.assert_allclose(fd, [[2.0, 5.0]], atol=1e-9)
    np.testing.assert_allclose(a.grad, fd, atol=1e-9)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_elementwise_basics():
    zero = t64([0.0])
    assert nx.elementwise("sigmoid", zero).data[0] == 0.5
    assert nx.elementwise("tanh", zero).data[0] == 0.0
    x = t64([0.0], grad=True)
    with Tape() as tape:
        y = nx.sum_all(nx.sigmoid(x))
    nx.backward(y, tape)
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_array_equal(nx.elementwise("sub-from-one", t64([0.25, 1.0])).data, [0.75, 0.0])
    np.testing.assert_array_equal(nx.elementwise("mul", t64([2.0, 3.0]), t64([4.0, 5.0])).data, [8, 15])


def test_elementwise_bias_broadcast_and_mismatch():
    out = nx.add(t64(np.zeros((2, 3))), t64([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(DimensionError):
        nx.add(t64(np.zeros((2, 3))), t64(np.zeros(2)))
    with pytest.raises(ValueError):
        nx.elementwise("relu", t64([1.0]))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(t64([0.0, 0.0])).data, [0.5, 0.5])
    big = nx.softmax(t64([1000.0, 1000.0, 1000.0])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1 / 3] * 3, atol=1e-15)
    logs = nx.softmax(t64([math.log(1), math.log(2), math.log(3)])).data
    np.testing.assert_allclose(logs, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    with pytest.raises(DimensionError):
        nx.softmax(t64(np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.randoms())
def test_softmax_sums_to_one_and_is_permutation_equivariant(x, rnd):
    p = nx.softmax(t64(x)).data
    assert abs(p.sum() - 1) <= 1e-6
    assert np.all(p >= 0)
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(nx.softmax(t64(x[perm])).data, p[perm], atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = t64([0.3, -2.0, 5.0, 1.0])
    np.testing.assert_allclose(nx.log_softmax(x).data, np.log(nx.softmax(x).data), atol=1e-12)


def test_concat_examples():
    assert nx.concat([t64([1, 2]), t64([3])]).data.tolist() == [1, 2, 3]
    with pytest.raises(DimensionError):
        nx.concat([])
    with pytest.raises(DimensionError):
        nx.concat([t64(np.zeros((2, 2))), t64(np.zeros((3, 2)))], axis=1)
    a, b = t64([1.0, 2.0], grad=True), t64([3.0], grad=True)
    with Tape() as tape:
        loss = nx.sum_all(nx.concat([a, b]))
    nx.backward(loss, tape)
    assert a.grad.tolist() == [1, 1] and b.grad.tolist() == [1]


def test_backward_square():
    x = t64([1.0, 2.0, 3.0], grad=True)
    with Tape() as tape:
        loss = nx.sum_all(nx.mul(x, x))
    nx.backward(loss, tape)
    assert x.grad.tolist() == [2, 4, 6]
    assert len(tape) == 0


def test_backward_constant_loss_leaves_zero_grads():
    x = t64([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = nx.sum_all(t64([5.0]))
    nx.backward(loss, tape)
    assert x.grad is None or not np.any(x.grad)


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = nx.mul(x, x)
    with pytest.raises(DimensionError):
        nx.backward(y, tape)


def test_tape_free_ops_record_nothing():
    x = t64([1.0, 2.0], grad=True)
    y = nx.tanh(x)
    assert y.node_id is None and not y.requires_grad


def test_grad_accumulates_over_shared_inputs():
    x = t64([3.0], grad=True)
    with Tape() as tape:
        loss = nx.sum_all(nx.add(nx.mul(x, x), nx.scale(x, 4.0)))
    nx.backward(loss, tape)
    assert x.grad[0] == pytest.approx(10.0)


def test_grad_check_sigmoid_at_zero():
    err = nx.grad_check(lambda p: nx.sum_all(nx.sigmoid(p)), t64([0.0]))
    assert err < 1e-7


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(5, 4)))
    target = np.array([1, 4, 0])

    def f(x):
        logp = nx.log_softmax(nx.linear(x, W))
        return nx.scale(nx.sum_all(nx.pick(logp, target)), -1.0)

    assert nx.grad_check(f, t64(rng.normal(size=(3, 4)))) < 1e-5


def test_grad_check_detects_wrong_backward_rule():
    def bad_sigmoid(a):
        out = 1 / (1 + np.exp(-a.data))
        return nx.record(out, (a,), lambda g: (g * out,))  # missing (1 - out)

    err = nx.grad_check(lambda p: nx.sum_all(bad_sigmoid(p)), t64([0.3, -0.7, 1.2]))
    assert err > 1e-2


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        nx.grad_check(lambda p: nx.sum_all(p), Tensor(np.zeros(2, dtype=np.float32)))


def _composite(x, w):
    h = nx.tanh(nx.linear(x, w))
    a = nx.softmax(nx.reshape(h, (2, 3)), axis=1)
    c = nx.concat([nx.reshape(a, (6,)), nx.sigmoid(h)])
    return nx.sum_all(nx.mul(c, nx.stack([c, c], axis=0)))


@pytest.mark.parametrize("seed", range(5))
def test_random_composites_agree_with_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(0.5 * rng.normal(size=(6, 4)))
    x = t64(rng.normal(size=4))
    assert nx.grad_check(lambda p: _composite(p, w), x) < 1e-4
    assert nx.grad_check(lambda p: _composite(x, p), t64(w.data.copy())) < 1e-4


def test_indexing_ops_gradients():
    rng = np.random.default_rng(0)
    table = t64(rng.normal(size=(5, 3)))
    ids = np.array([[0, 4], [4, 2]])
    assert nx.grad_check(lambda p: nx.sum_all(nx.mul(nx.take_rows(p, ids), nx.take_rows(p, ids))),
                         table) < 1e-6
    assert nx.grad_check(lambda p: nx.sum_all(nx.tanh(nx.getitem(p, (slice(1, 3), 0)))), table) < 1e-6
    assert nx.grad_check(lambda p: nx.sum_all(nx.sum_axis(nx.mul(p, p), axis=0)), table) < 1e-6
    assert nx.grad_check(lambda p: nx.sum_all(nx.tanh(nx.transpose(p))), table) < 1e-6


def test_forward_is_bit_identical_for_same_seed():
    def run():
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        x = Tensor(rng.normal(size=(3, 8)).astype(np.float32))
        return nx.softmax(nx.tanh(nx.linear(x, w))).data

    assert run().tobytes() == run().tobytes()
