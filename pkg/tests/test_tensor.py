import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmb import tensor as T
from ssmb.tensor import Tensor

from oracles import broadcast_reference, conv2d_direct, max_rel_error, numerical_grad

RNG_SEEDS = range(20)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def check_grad(build, arrays, tol=1e-6):
    """Compare tape gradients of sum(weights * build(...)) against finite differences."""
    ts = [t64(a) for a in arrays]
    out = build(*ts)
    weights = np.random.default_rng(99).normal(size=out.shape)
    T.sum(out * weights).backward()

    def f():
        return float(np.sum(build(*[Tensor(a) for a in arrays]).data * weights))

    numeric = numerical_grad(f, arrays)
    return max(max_rel_error(t.grad, n) for t, n in zip(ts, numeric))


# -- elementwise --------------------------------------------------------
def test_add_example():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_mul_by_zero_scalar():
    np.testing.assert_array_equal(T.mul(Tensor([2.0, 3.0]), 0).data, [0, 0])


def test_elementwise_dispatch_names():
    a, b = Tensor([4.0, 9.0]), Tensor([2.0, 3.0])
    assert T.elementwise("div", a, b).data.tolist() == [2, 3]
    assert T.elementwise("sqrt", a).data.tolist() == [2, 3]
    assert T.elementwise("max-with", a, Tensor([5.0, 1.0])).data.tolist() == [5, 9]
    assert T.elementwise("negate", a).data.tolist() == [-4, -9]
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_shape_mismatch():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_domain_errors():
    with pytest.raises(T.DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(T.DomainError):
        T.div(Tensor([1.0]), Tensor([0.0]))


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "max-with"])
@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_binary_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    if kind == "div":
        b = np.sign(b) * (np.abs(b) + 0.5)
    assert check_grad(lambda x, y: T.elementwise(kind, x, y), [a, b]) < 1e-6


@pytest.mark.parametrize("kind", ["relu", "sqrt", "exp", "log", "negate"])
@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_unary_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 5))
    if kind in ("sqrt", "log"):
        a = np.abs(a) + 0.1
    assert check_grad(lambda x: T.elementwise(kind, x), [a]) < 1e-6


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(1, 3), min_size=1, max_size=3),
    st.lists(st.booleans(), min_size=3, max_size=3),
    st.integers(0, 2),
    st.sampled_from(["add", "sub", "mul", "max-with"]),
)
def test_broadcasting_matches_scalar_reference(shape, ones, drop, kind):
    rng = np.random.default_rng(len(shape) + drop)
    sb = [1 if flag else n for n, flag in zip(shape, ones)][drop:]
    a = rng.normal(size=shape)
    b = rng.normal(size=sb)
    ops = {"add": lambda x, y: x + y, "sub": lambda x, y: x - y, "mul": lambda x, y: x * y, "max-with": max}
    got = T.elementwise(kind, Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_array_equal(got, broadcast_reference(ops[kind], a, b))


# -- matmul -------------------------------------------------------------
def test_matmul_identity_and_hand_arithmetic():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ m).data, m.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_example():
    with T.precision(np.float64):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True)
        b = Tensor([[2.0, 3.0], [4.0, 5.0]])
        T.sum(a @ b).backward()
    frozen = np.array([[1.0, 0.0], [0.0, 1.0]])
    (numeric,) = numerical_grad(lambda: float(np.sum(frozen @ b.data)), [frozen])
    np.testing.assert_allclose(numeric, [[5, 9], [5, 9]], atol=1e-8)
    np.testing.assert_allclose(a.grad, numeric, rtol=1e-6)


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_matmul_gradients(seed):
    rng = np.random.default_rng(seed)
    assert check_grad(T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]) < 1e-6


# -- conv2d -------------------------------------------------------------
def test_conv_ones_example():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    ref = conv2d_direct(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), pad=1)[0, 0]
    np.testing.assert_array_equal(out, ref)
    assert out[1, 1] == 9 and out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 1, 5, 5))
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_direct_loops(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    for pad in (0, 1):
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad).data
        np.testing.assert_allclose(got, conv2d_direct(x, w, b, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    assert check_grad(lambda x_, w_, b_: T.conv2d(x_, w_, b_, padding=1), [x, w, b]) < 1e-6


def test_conv_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


# -- reductions ---------------------------------------------------------
def test_reduce_examples():
    assert T.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5
    assert T.reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]), 1).data.tolist() == [3, 7]
    x = Tensor([2.0, 5.0, 5.0], requires_grad=True)
    m = T.amax(x)
    assert m.item() == 5
    m.backward()
    assert x.grad.tolist() == [0, 1, 0]


def test_reduce_invalid_axis():
    with pytest.raises(T.AxisError):
        T.reduce("sum", Tensor(np.ones((2, 2))), 2)


@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_reduce_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    axes = [None, 0, (1, 2), -1][seed % 4]
    assert check_grad(lambda x: T.reduce(kind, x, axes), [rng.normal(size=(2, 3, 4))]) < 1e-6


def test_max_pool_routes_to_first_maximum():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.sum(T.max_pool2d(x)).backward()
    assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]


# -- softmax ------------------------------------------------------------
def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax(Tensor(np.zeros(4)), 0).data, [0.25] * 4)
    out = T.softmax(Tensor([1000.0, 0.0], dtype=np.float64), 0).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(T.DomainError):
        T.softmax(Tensor([np.nan, 1.0]), 0)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_softmax_jacobian(seed):
    x = np.random.default_rng(seed).normal(size=4)
    assert check_grad(lambda t: T.softmax(t, 0), [x]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    out = T.softmax(Tensor(np.array(values)), 0).data
    assert abs(out.sum() - 1) < 1e-6 and np.all(out >= 0)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_log_softmax_gradients(seed):
    x = np.random.default_rng(seed).normal(size=(3, 5))
    assert check_grad(lambda t: T.log_softmax(t, 1), [x]) < 1e-6


# -- structural ops -----------------------------------------------------
@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_structural_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    idx = rng.integers(0, 3, size=5)
    assert check_grad(lambda x, y: T.concat([x, y], 1)[idx], [a, b]) < 1e-6
    assert check_grad(lambda x: T.transpose(T.reshape(x, (2, 3))), [a]) < 1e-6


# -- backward -----------------------------------------------------------
def test_backward_examples():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    T.sum(x).backward()
    assert np.all(x.grad == 1)
    y = Tensor([1.0, -2.0], requires_grad=True)
    T.sum(y * y).backward()
    assert y.grad.tolist() == [2, -4]


def test_backward_accumulates():
    y = Tensor([1.0, -2.0], requires_grad=True)
    for _ in range(2):
        T.sum(y * y).backward()
    assert y.grad.tolist() == [4, -8]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        (x * 2).backward()


def test_backward_visits_in_reverse_forward_order(monkeypatch):
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = x * 2
    b = T.exp(x)
    c = a + b
    loss = T.sum(c)
    forward = [a, b, c, loss]
    visited = []
    for t in forward:
        fn = t._backward

        def spy(g, fn=fn, t=t):
            visited.append(t)
            return fn(g)

        t._backward = spy
    loss.backward()
    assert visited == forward[::-1]


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 3, 8, 8)), rng.normal(size=(5, 3, 3, 3))
    outs = [T.conv2d(Tensor(x), Tensor(w), padding=1).data.tobytes() for _ in range(3)]
    assert len(set(outs)) == 1


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3
    assert not y.requires_grad


def test_precision_switch():
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
