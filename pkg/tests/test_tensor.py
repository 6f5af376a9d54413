import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echoai import tensor as T
from echoai.errors import ContractError, DimensionError, NumericError
from echoai.tensor import Tensor, gradcheck, no_grad


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_matmul_identity_and_hand_example():
    x = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x.astype(np.float32))
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum_matches_finite_differences(rng):
    report = gradcheck(lambda a, b: T.tsum(T.matmul(a, b)), [rng.standard_normal((3, 4)),
                                                              rng.standard_normal((4, 2))])
    assert report.ok, str(report)


def test_softmax_examples():
    assert np.allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    assert np.allclose(T.softmax_lastdim(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-6)
    e = np.exp([1.0, 2.0, 3.0])
    expected = e / e.sum()
    out = T.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(out, expected, atol=1e-6)
    assert np.allclose(out, [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_softmax_rejects_non_finite_input():
    with pytest.raises(NumericError):
        T.softmax_lastdim(Tensor([1.0, np.nan]))


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(T.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero, eps=1e-5).data, 0.0)
    out = T.layer_norm(Tensor([1.0, 2.0, 3.0]), one, zero, eps=1e-5).data
    # population variance 2/3 -> scale 1/sqrt(2/3 + eps)
    expected = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2 / 3 + 1e-5)
    assert np.allclose(out, expected, atol=1e-6)
    assert np.allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layer_norm_gradient(rng):
    w = Tensor(rng.standard_normal((2, 8)), dtype=np.float64)
    report = gradcheck(lambda x, g, b: T.tsum(T.mul(T.layer_norm(x, g, b), w)),
                       [rng.standard_normal((2, 8)), rng.standard_normal(8), rng.standard_normal(8)])
    assert report.ok, str(report)


def test_gelu_and_layout_primitives(rng):
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    x = rng.standard_normal((5, 3)).astype(np.float32)
    assert np.array_equal(T.gather_rows(Tensor(x), np.arange(5)).data, x)
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(x), [5])
    assert T.concat([Tensor(x), Tensor(x)], axis=1).shape == (5, 6)
    assert T.transpose(Tensor(x), (1, 0)).shape == (3, 5)


def test_gather_rows_backward_is_one_hot():
    x = leaf(np.arange(12.0).reshape(4, 3))
    T.backward(T.tsum(T.gather_rows(x, [2])))
    expected = np.zeros((4, 3))
    expected[2] = 1
    assert np.array_equal(x.grad, expected)


def test_gather_rows_repeated_ids_accumulate():
    x = leaf(np.ones((3, 2)))
    T.backward(T.tsum(T.gather_rows(x, [1, 1, 0])))
    assert x.grad[:, 0].tolist() == [1.0, 2.0, 0.0]


def test_mse_examples(rng):
    assert T.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert T.mse_loss(Tensor([1.0, 2.0]), Tensor([3.0, 2.0])).item() == pytest.approx(2.0)
    with pytest.raises(DimensionError):
        T.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0]))
    target = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    report = gradcheck(lambda p: T.mse_loss(p, target), [rng.standard_normal((3, 4))], rtol=1e-4)
    assert report.ok, str(report)


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    assert x.grad.tolist() == [2.0, 4.0]
    with pytest.raises(ContractError):
        loss.backward()


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(T.scale(leaf([1.0, 2.0]), 2.0))


def test_leaf_gradients_accumulate_across_passes():
    x = leaf([3.0])
    T.backward(T.tsum(T.scale(x, 2.0)))
    T.backward(T.tsum(T.scale(x, 5.0)))
    assert x.grad.tolist() == [7.0]


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_two_layer_mlp_gradient(rng):
    x, y = Tensor(rng.standard_normal((6, 5)), dtype=np.float64), Tensor(rng.standard_normal((6, 1)), dtype=np.float64)
    report = gradcheck(lambda a, b: T.mse_loss(T.matmul(T.gelu(T.matmul(x, a)), b), y),
                       [0.5 * rng.standard_normal((5, 8)), 0.5 * rng.standard_normal((8, 1))])
    assert report.ok, str(report)


def test_gradcheck_flags_a_wrong_backward():
    def bad_square(x):
        out = Tensor._result(x.data ** 2, [x], "bad_square")
        if out.requires_grad:
            out._backward = lambda g: T._accumulate(x, g * x.data)  # missing factor 2
        return out

    report = gradcheck(lambda x: T.tsum(bad_square(x)), [np.array([1.0, 2.0])])
    assert not report.ok


_shapes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=25, deadline=None)
@given(shape=_shapes, seed=st.integers(0, 2**16))
def test_composite_gradients_match_finite_differences(shape, seed):
    m, k, n = shape
    r = np.random.default_rng(seed)
    w = Tensor(r.standard_normal((m, n)), dtype=np.float64)

    def fn(a, b, g, bias):
        h = T.layer_norm(T.matmul(a, b), g, bias) if n > 1 else T.matmul(a, b)
        return T.tsum(T.mul(T.softmax_lastdim(T.gelu(h)), w))

    # small step: a k=1 layer norm can be sharply curved, which h=1e-3 would not resolve
    report = gradcheck(fn, [r.standard_normal((m, k)), r.standard_normal((k, n)),
                            1 + 0.1 * r.standard_normal(n), 0.1 * r.standard_normal(n)], h=1e-6)
    assert report.ok, str(report)


@settings(max_examples=25, deadline=None)
@given(a=st.tuples(st.integers(1, 3), st.integers(1, 3)), broadcast_rows=st.booleans(), seed=st.integers(0, 999))
def test_broadcast_add_mul_gradients(a, broadcast_rows, seed):
    r = np.random.default_rng(seed)
    other = (1, a[1]) if broadcast_rows else (a[0], 1)
    report = gradcheck(lambda x, y: T.tsum(T.mul(T.add(x, y), T.sub(x, y))),
                       [r.standard_normal(a), r.standard_normal(other)])
    assert report.ok, str(report)
