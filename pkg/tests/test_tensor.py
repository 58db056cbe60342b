import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protodet import tensor as T
from protodet.errors import NonFiniteError, ZeroVectorError
from protodet.rng import Rng
from protodet.tensor import Tensor, grad_check


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    np.testing.assert_allclose(T.l2_normalize(Tensor([[1.0, 0.0, 0.0]])).data, [[1.0, 0.0, 0.0]])
    with pytest.raises(ZeroVectorError):
        T.l2_normalize(Tensor([[0.0, 0.0]]))


def test_cosine_sim_examples():
    assert T.cosine_sim_matrix(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]])).data[0, 0] == pytest.approx(1.0)
    assert T.cosine_sim_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data[0, 0] == pytest.approx(0.0)
    s = T.cosine_sim_matrix(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0], [0.0, -1.0]])).data
    # hand dot products: 1/sqrt(2) and -1/sqrt(2)
    np.testing.assert_allclose(s, [[0.5**0.5, -(0.5**0.5)]], atol=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-9 and abs(out[1]) < 1e-9
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    # monotone: larger input never gets a smaller weight
    order = np.argsort(x, axis=-1, kind="stable")
    assert np.all(np.diff(np.take_along_axis(out, order, axis=-1), axis=-1) >= -1e-15)


def test_grad_check_quadratic_and_norm():
    assert grad_check(lambda x: T.tsum(x * x), Tensor([3.0])) < 1e-6
    f = lambda x: T.sqrt(T.tsum(x * x))
    x = Tensor([3.0, 4.0], requires_grad=True)
    f(x).backward()
    np.testing.assert_allclose(x.grad, [0.6, 0.8])
    assert grad_check(f, Tensor([3.0, 4.0])) < 1e-4


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: T.tsum(x), Tensor([1.0]), h=1e-2)


def test_grad_check_nonfinite():
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: T.tsum(T.log(x)), Tensor([1e-7]), h=1e-5)


def test_ops_raise_on_nonfinite():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


def _rand(shape, key, scale=1.0):
    return Rng(7).child(key).normal(0, scale, shape)


@pytest.mark.parametrize(
    "name,fn,shape",
    [
        ("matmul", lambda x: T.tsum(T.matmul(x, Tensor(_rand((4, 3), "w"))) ** 2), (2, 4)),
        ("batched", lambda x: T.tsum(T.matmul(x, T.transpose(x, (0, 2, 1))) ** 2), (2, 3, 4)),
        ("softmax", lambda x: T.tsum(T.softmax(x) * Tensor(_rand((3, 5), "s"))), (3, 5)),
        ("layer_norm", lambda x: T.tsum(T.layer_norm(x, Tensor(_rand(5, "g")), Tensor(_rand(5, "b"))) * Tensor(_rand((3, 5), "c"))), (3, 5)),
        ("l2n", lambda x: T.tsum(T.l2_normalize(x) * Tensor(_rand((3, 5), "d"))), (3, 5)),
        ("cosine", lambda x: T.tsum(T.cosine_sim_matrix(x, Tensor(_rand((2, 5), "e"))) ** 2), (3, 5)),
        ("gelu", lambda x: T.tsum(T.gelu(x)), (4, 3)),
        ("softplus_sigmoid", lambda x: T.tsum(T.softplus(x) * T.sigmoid(x)), (6,)),
        ("concat_getitem", lambda x: T.tsum(T.concat([x, x * 2.0], axis=0)[1:5] ** 2), (3, 2)),
        ("stack_mean", lambda x: T.mean(T.stack([x, T.exp(x)], axis=1), axis=(0, 2)).sum(), (3, 2)),
        ("clamp_abs", lambda x: T.tsum(T.absolute(T.clamp(x, -0.5, 0.7))), (8,)),
        ("max_min", lambda x: T.tsum(T.maximum(x, Tensor(0.1)) - T.minimum(x, Tensor(-0.2))), (8,)),
    ],
)
def test_op_gradients(name, fn, shape):
    x = _rand(shape, name)
    if name in ("clamp_abs", "max_min"):
        # keep probes away from kinks
        x = np.array([-0.9, -0.35, -0.05, 0.3, 0.45, 0.95, 1.4, -1.6])
    assert grad_check(fn, x) < 1e-6


def test_broadcast_backward():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    T.tsum(a * b).backward()
    np.testing.assert_allclose(b.grad, [3.0, 3.0, 3.0, 3.0])
    np.testing.assert_allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))


def test_shared_node_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    T.tsum(y + y).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_rng_deterministic_and_children_independent():
    a, b = Rng(5), Rng(5)
    np.testing.assert_array_equal(a.normal(size=10), b.normal(size=10))
    c1, c2 = Rng(5).child("x"), Rng(5).child("y")
    assert not np.array_equal(c1.uniform(size=5), c2.uniform(size=5))
    np.testing.assert_array_equal(Rng(5).child("x").uniform(size=5), Rng(5).child("x").uniform(size=5))
