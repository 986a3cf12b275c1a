import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spheremoe import grad as G
from spheremoe.errors import ContractError, RangeError, ShapeError
from spheremoe.grad import Tape, Tensor, backward, grad_check, parameter


def test_forward_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert G.mse(x, x).item() == 0.0
    assert np.allclose(G.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    g = G.gather_rows(Tensor([[1.0, 2.0], [3.0, 4.0]]), [1, 0, 0])
    assert g.data.tolist() == [[3, 4], [1, 2], [1, 2]]


def test_sum_of_squares_gradient():
    x = parameter([3.0])
    with Tape() as tape:
        loss = G.sum(G.mul(x, x))
    (gx,) = backward(loss, tape, [x])
    assert gx.tolist() == [6.0]


def test_linear_mse_gradient_hand_expansion():
    W = parameter([[1.0, 2.0], [0.5, -1.0]])
    x = Tensor([[2.0], [1.0]])
    y = Tensor([[1.0], [0.0]])
    with Tape() as tape:
        loss = G.mse(G.matmul(W, x), y, reduction="sum")
    (gW,) = backward(loss, tape, [W])
    r = W.data @ x.data - y.data            # [[3], [0]]
    assert np.allclose(gW, 2 * r @ x.data.T)
    assert np.allclose(gW, [[12.0, 6.0], [0.0, 0.0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 10_000))
def test_gather_scatter_adjoint(n_rows, n_idx, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_rows, 3))
    idx = rng.integers(0, n_rows, n_idx)
    v = rng.normal(size=(n_idx, 3))
    lhs = np.sum(G.gather_rows(Tensor(u), idx).data * v)
    rhs = np.sum(u * G.scatter_add(Tensor(v), idx, n_rows).data)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_unused_parameter_gets_zero_gradient():
    a, b = parameter([1.0, 2.0]), parameter([5.0])
    with Tape() as tape:
        loss = G.sum(G.mul(a, a))
    ga, gb = backward(loss, tape, [a, b])
    assert gb.tolist() == [0.0]


def test_nonscalar_loss_is_contract_error():
    a = parameter([1.0, 2.0])
    with Tape() as tape:
        y = G.scale(a, 2.0)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_vector_jacobian_product():
    a = parameter([1.0, 2.0])
    with Tape() as tape:
        y = G.mul(a, a)
    (g,) = backward(y, tape, [a], grad_output=np.array([1.0, 0.0]))
    assert g.tolist() == [2.0, 0.0]


def test_no_recording_outside_tape():
    a = parameter([1.0])
    y = G.mul(a, a)
    assert not y.requires_grad


def test_shape_and_range_errors():
    with pytest.raises(ShapeError):
        G.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        G.add(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 3))))  # two-sided broadcast
    with pytest.raises(ShapeError):
        G.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(RangeError):
        G.gather_rows(Tensor(np.ones((2, 2))), [2])
    with pytest.raises(RangeError):
        G.scatter_add(Tensor(np.ones((1, 2))), [-1], 3)
    with pytest.raises(ShapeError):
        G.mse(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_dropout_eval_identity_and_seeded_masks():
    x = Tensor(np.ones((50, 4)))
    assert G.dropout(x, 0.5, train=False) is x
    a = G.dropout(x, 0.5, True, np.random.default_rng(3)).data
    b = G.dropout(x, 0.5, True, np.random.default_rng(3)).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_linear_layer_grad_check_f64():
    rng = np.random.default_rng(1)
    W = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=3))
    x = Tensor(rng.normal(size=(5, 4)))
    y = Tensor(rng.normal(size=(5, 3)))
    res = grad_check(lambda: G.mse(G.add(G.matmul(x, W), b), y), [W, b])
    assert res.max_rel_err < 1e-6


def test_relu_kink_is_excluded():
    x = parameter([0.0, 1.0, -2.0])
    res = grad_check(lambda: G.sum(G.relu(x)), [x])
    assert res.excluded == 1 and res.checked == 2
    assert res.max_rel_err < 1e-8


def test_all_ops_grad_check():
    rng = np.random.default_rng(2)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 2, 2)) * 0.5)
    c = parameter(rng.uniform(0.5, 1.5, size=(3, 4)))

    def f():
        h = G.layer_norm(G.gelu(a), axis=-1)
        h = G.add(h, G.tanh(G.div(a, c)))
        h = G.mul(h, G.sigmoid(c))
        m = G.matmul(h, G.reshape(b, (4, 4)))
        m = G.concat([m, G.scale(m, -0.5)], axis=0)
        s = G.softmax(m, axis=0)
        g = G.scatter_add(G.gather_rows(s, [0, 2, 5, 5]), [1, 0, 1, 2], 3)
        return G.add(G.mean(G.mul(g, g)), G.sum(G.slice_(s, (slice(1, 4), slice(0, 2)))))

    res = grad_check(f, [a, b, c])
    assert res.max_rel_err < 1e-6 and res.excluded == 0


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(2, 3)))

    def grads(fn):
        with Tape() as tape:
            loss = fn()
        return backward(loss, tape, [x])[0]

    f = lambda: G.sum(G.tanh(x))
    g = lambda: G.mean(G.mul(x, x))
    combo = lambda: G.add(G.scale(f(), alpha), G.scale(g(), beta))
    assert np.allclose(grads(combo), alpha * grads(f) + beta * grads(g), atol=1e-12)
