import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, matmul_loops, relative_error
from pointfbi import tensor as T
from pointfbi.errors import ContractError, DimensionError
from pointfbi.tensor import Graph, Tensor


def grad_of(build, *arrays):
    """Autodiff gradient of scalar ``build(*tensors)`` with respect to each input array."""
    with Graph() as g:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        root = build(*leaves)
    grads = g.backward(root)
    return [grads[t.id].numpy() for t in leaves]


def value_of(build, *arrays):
    return build(*[Tensor(a) for a in arrays]).item()


# -- matmul ----------------------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_row_by_column():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (3, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a.tolist(), b.tolist()), rtol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradient_sums_over_batch(rng):
    a, b = rng.uniform(-1, 1, (2, 5, 3)), rng.uniform(-1, 1, (3, 4))
    r = rng.uniform(-1, 1, (2, 5, 4))
    build = lambda x, y: T.sum_all(T.mul(T.matmul(x, y), Tensor(r)))
    ga, gb = grad_of(build, a, b)
    np.testing.assert_allclose(gb, central_difference(lambda y: value_of(build, a, y), b), rtol=1e-7)
    np.testing.assert_allclose(ga, central_difference(lambda x: value_of(build, x, b), a), rtol=1e-7)


@st.composite
def matmul_pairs(draw):
    m, k, p = draw(st.integers(1, 5)), draw(st.integers(1, 5)), draw(st.integers(1, 5))
    elems = st.floats(-10, 10)
    return draw(arrays(np.float64, (m, k), elements=elems)), draw(arrays(np.float64, (k, p), elements=elems))


@settings(max_examples=40, deadline=None)
@given(matmul_pairs())
def test_matmul_property_against_loops(pair):
    a, b = pair
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a.tolist(), b.tolist()), atol=1e-9)


# -- relu ------------------------------------------------------------------------------


def test_relu_values():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert not T.relu(Tensor(-np.arange(1.0, 6.0))).data.any()


def test_relu_gradient_is_indicator():
    (g,) = grad_of(lambda x: T.sum_all(T.relu(x)), np.array([-1.0, 2.0]))
    assert g.tolist() == [0.0, 1.0]


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda x: T.sum_all(T.relu(x)), np.array([0.0]))
    assert g.tolist() == [0.0]


# -- pooling -----------------------------------------------------------------------------


def test_max_pool_columns():
    values, argmax = T.max_pool_points(Tensor([[1.0, 5.0], [3.0, 2.0]]))
    assert values.data.tolist() == [3.0, 5.0]
    assert argmax.tolist() == [1, 0]


def test_max_pool_single_point():
    row = np.array([[0.5, -1.0, 2.0]])
    values, argmax = T.max_pool_points(Tensor(row))
    assert values.data.tolist() == row[0].tolist()
    assert argmax.tolist() == [0, 0, 0]


def test_max_pool_ties_go_to_lowest_index():
    _, argmax = T.max_pool_points(Tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))
    assert argmax.tolist() == [0, 0]


def test_max_pool_empty_raises():
    with pytest.raises(DimensionError):
        T.max_pool_points(Tensor(np.zeros((0, 3))))
    with pytest.raises(DimensionError):
        T.mean_pool_points(Tensor(np.zeros((0, 3))))


def test_max_pool_gradient_is_matrix_unit_per_column(rng):
    f = rng.uniform(-1, 1, (7, 4))
    build = lambda x: T.sum_all(T.max_pool_points(x)[0])
    (g,) = grad_of(build, f)
    np.testing.assert_allclose(g, central_difference(lambda x: value_of(build, x), f), atol=1e-9)
    assert (np.count_nonzero(g, axis=0) == 1).all()
    np.testing.assert_array_equal(g[f.argmax(axis=0), np.arange(4)], 1.0)
    assert g.sum() == 4.0


def test_mean_pool():
    assert T.mean_pool_points(Tensor([[0.0, 2.0], [2.0, 0.0]])).data.tolist() == [1.0, 1.0]
    assert T.mean_pool_points(Tensor([[3.0, -1.0]])).data.tolist() == [3.0, -1.0]
    (g,) = grad_of(lambda x: T.sum_all(T.mean_pool_points(x)), np.ones((4, 3)))
    np.testing.assert_array_equal(g, np.full((4, 3), 0.25))


# -- softmax cross-entropy ----------------------------------------------------------------


def test_cross_entropy_uniform_logits_is_log_c():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 6))), [0, 3, 5])
    assert loss.item() == pytest.approx(math.log(6), rel=1e-15)


def test_cross_entropy_huge_margin_tends_to_zero():
    logits = np.array([[1000.0, 0.0, 0.0]])
    assert T.softmax_cross_entropy(Tensor(logits), [0]).item() < 1e-300


def test_cross_entropy_gradient(rng):
    logits = rng.uniform(-1, 1, (4, 5))
    labels = [0, 4, 2, 2]
    build = lambda z: T.softmax_cross_entropy(z, labels)
    (g,) = grad_of(build, logits)
    expected = T.softmax(logits) - np.eye(5)[labels]
    np.testing.assert_allclose(g, expected / 4, rtol=1e-12)
    fd = central_difference(lambda z: value_of(build, z), logits)
    assert relative_error(g, fd) < 1e-4


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


# -- backward --------------------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    (g,) = grad_of(T.sum_all, np.zeros((2, 3, 4)))
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_backward_needs_scalar_root():
    with Graph() as g:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.relu(x)
    with pytest.raises(ContractError):
        g.backward(y)


def test_graph_is_single_use():
    with Graph() as g:
        x = Tensor([1.0], requires_grad=True)
        y = T.sum_all(x)
    g.backward(y)
    with pytest.raises(ContractError):
        g.backward(y)


def test_nothing_recorded_outside_graph():
    g = Graph()
    T.sum_all(Tensor([1.0], requires_grad=True))
    assert g.nodes == []


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_shared_input_accumulates():
    # d/dx sum(x*x + x) = 2x + 1
    x0 = np.array([0.5, -2.0])
    (g,) = grad_of(lambda x: T.sum_all(T.add(T.mul(x, x), x)), x0)
    np.testing.assert_allclose(g, 2 * x0 + 1)


def mlp(x, w1, b1, w2, b2, w3, b3):
    h = T.relu(x @ w1 + b1)
    h = T.relu(h @ w2 + b2)
    return T.sum_all(T.mul(h @ w3 + b3, Tensor(np.linspace(-1, 1, 2))))


def test_three_layer_mlp_matches_finite_differences(rng):
    shapes = [(5, 3), (3, 4), (4,), (4, 4), (4,), (4, 2), (2,)]
    params = [rng.uniform(-1, 1, s) for s in shapes]
    grads = grad_of(mlp, *params)
    for i, (p, g) in enumerate(zip(params, grads)):
        def f(v, i=i):
            args = list(params)
            args[i] = v
            return value_of(mlp, *args)

        fd = central_difference(f, p)
        assert relative_error(g, fd) < 1e-4, f"parameter {i}"


def test_backward_is_deterministic(rng):
    shapes = [(6, 3), (3, 8), (8,), (8, 8), (8,), (8, 2), (2,)]
    params = [rng.uniform(-1, 1, s) for s in shapes]
    first = grad_of(mlp, *params)
    second = grad_of(mlp, *params)
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


def test_zero_input_gradients_under_max_pool(random_model, rng):
    # per-point featurizer, max bottleneck: at most F points get gradient
    pts = rng.uniform(-1, 1, (256, 3))
    with Graph() as g:
        x = Tensor(pts, requires_grad=True)
        feats = x
        for w, b in random_model.weights[:3]:
            feats = T.relu(feats @ Tensor(w) + Tensor(b))
        root = T.sum_all(T.max_pool_points(feats)[0])
    grad = g.backward(root)[x.id].data
    zero_rows = int((np.abs(grad).sum(axis=1) == 0).sum())
    assert zero_rows >= 256 - 64


@pytest.mark.parametrize(
    "op",
    [
        lambda x: T.sum_all(T.scale(x, -2.5)),
        lambda x: T.sum_all(T.take(x, 1)),
        lambda x: T.sum_all(T.concat([x, T.relu(x)])),
        lambda x: T.sum_all(T.mean_pool_points(T.mul(x, x))),
    ],
    ids=["scale", "take", "concat", "mean_pool"],
)
def test_misc_ops_match_finite_differences(op, rng):
    x = rng.uniform(-1, 1, (5, 3))
    (g,) = grad_of(op, x)
    assert relative_error(g, central_difference(lambda v: value_of(op, v), x)) < 1e-4
