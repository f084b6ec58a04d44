import itertools

import numpy as np
import pytest

from oracles import central_difference, critical_loops
from pointfbi import data, network, xai
from pointfbi.errors import ContractError


def test_fbi_row_example():
    assert xai.fbi([[-1.0, 2.0, 0.5]]).scores.tolist() == [3.5]


def test_fbi_zero_matrix():
    assert not xai.fbi(np.zeros((4, 3))).scores.any()


def test_fbi_matches_loop_oracle(rng):
    f = rng.normal(size=(5, 4))
    expected = []
    for row in f.tolist():
        total = 0.0
        for v in row:
            total += abs(v)
        expected.append(total)
    assert xai.fbi(f).scores.tolist() == expected


def test_fbi_rejects_vectors():
    with pytest.raises(ContractError):
        xai.fbi(np.ones(4))


def test_fbi_p_one_is_fbi(rng):
    f = rng.normal(size=(20, 7))
    assert xai.fbi_p(f, 1).scores.tobytes() == xai.fbi(f).scores.tobytes()


def test_fbi_p_euclidean():
    assert xai.fbi_p([[3.0, 4.0]], 2).scores[0] == pytest.approx(5.0, rel=1e-15)


@pytest.mark.parametrize("p", [0.2, 8.5, -1.0])
def test_fbi_p_range(p):
    with pytest.raises(ContractError):
        xai.fbi_p(np.ones((2, 2)), p)


def test_fbi_p_high_order_tracks_row_max(rng):
    # 1000 random rows in blocks of 10, row scales spread log-uniformly over two decades;
    # the top row under p=8 should usually be the top row under max|.|
    agree = 0
    for _ in range(100):
        f = rng.uniform(-1, 1, (10, 16)) * 10 ** rng.uniform(0, 2, (10, 1))
        agree += xai.fbi_p(f, 8).top(1)[0] == np.abs(f).max(axis=1).argmax()
    assert agree >= 95


def test_fbi_scale_covariance(rng):
    f = rng.normal(size=(30, 8))
    for alpha in (2.5, -0.3, 1e-3):
        np.testing.assert_allclose(xai.fbi(alpha * f).scores, abs(alpha) * xai.fbi(f).scores, rtol=1e-12)
    assert np.array_equal(xai.fbi(7.0 * f).ranking(), xai.fbi(f).ranking())


def test_ranking_breaks_ties_by_index():
    m = xai.InfluenceMap(np.array([1.0, 3.0, 1.0, 3.0]), "fbi")
    assert m.ranking().tolist() == [1, 3, 0, 2]
    assert m.top(2).tolist() == [1, 3]


# -- critical points ---------------------------------------------------------------------


def test_critical_two_by_two():
    assert xai.critical_points([[1.0, 5.0], [3.0, 2.0]]).scores.tolist() == [1.0, 1.0]


def test_single_dominating_row():
    f = np.array([[0.0, 1.0], [5.0, 6.0], [1.0, 0.0]])
    assert xai.critical_points(f).scores.tolist() == [0.0, 1.0, 0.0]


def test_ties_have_no_winner():
    f = np.array([[2.0, 0.0], [2.0, 1.0], [0.0, 0.0]])
    assert xai.critical_winners(f).tolist() == [-1, 1]
    assert xai.critical_points(f).scores.tolist() == [0.0, 1.0, 0.0]


def test_critical_set_size_bounded_by_features(rng):
    for _ in range(50):
        n, nf = rng.integers(1, 40, size=2)
        f = rng.normal(size=(n, nf))
        assert len(xai.critical_set(f)) <= nf


def test_critical_exhaustive_small_matrices():
    checked = 0
    for n, nf in [(1, 1), (1, 3), (2, 2), (2, 3), (3, 2), (3, 3), (4, 2), (2, 4)]:
        for values in itertools.product((0.0, 1.0, 2.0), repeat=n * nf):
            f = np.array(values).reshape(n, nf)
            assert xai.critical_points(f).scores.tolist() == critical_loops(f.tolist())
            checked += 1
    assert checked > 20_000


def test_critical_random_matrices_up_to_8x8(rng):
    for n in range(1, 9):
        for nf in range(1, 9):
            f = rng.integers(0, 3, size=(n, nf)).astype(float)
            assert xai.critical_points(f).scores.tolist() == critical_loops(f.tolist())


# -- gradient saliency ---------------------------------------------------------------------


def test_gradient_zero_outside_critical_set(random_model, rng):
    pts = rng.uniform(-1, 1, (256, 3))
    scores = xai.gradient_saliency(random_model, pts).scores
    crit = xai.critical_points(network.features(random_model, pts)).scores
    zero = scores < 1e-12
    assert zero.sum() >= 256 - 64
    assert (zero | (crit == 1)).all()


def test_gradient_matches_finite_differences(random_model, rng):
    pts = rng.uniform(-1, 1, (64, 3))
    target = int(network.predict(random_model, pts))
    scores = xai.gradient_saliency(random_model, pts).scores
    live = np.flatnonzero(scores > 0)
    chosen = rng.choice(live, size=min(10, len(live)), replace=False)
    for i in chosen:
        def logit(p, i=i):
            x = pts.copy()
            x[i] = p
            return network.logits(random_model, x)[target]

        fd = np.linalg.norm(central_difference(logit, pts[i]))
        assert scores[i] == pytest.approx(fd, rel=1e-3)


def test_gradient_saliency_on_max_mean_model_is_dense(rng):
    model = network.init_weights(network.ModelConfig(pooling="max_mean_concat"), seed=3)
    scores = xai.gradient_saliency(model, rng.uniform(-1, 1, (100, 3))).scores
    assert (scores > 0).sum() > 64


# -- integrated gradients ----------------------------------------------------------------------


def test_integrated_gradients_zero_at_baseline(random_model):
    pc = np.zeros((32, 3))
    assert not xai.integrated_gradients(random_model, pc, steps=10).scores.any()


def test_integrated_gradients_steps_contract(random_model, rng):
    with pytest.raises(ContractError):
        xai.integrated_gradients(random_model, rng.uniform(-1, 1, (10, 3)), steps=1)


def test_integrated_gradients_converges(model, test_set):
    pc = test_set[0]
    coarse = xai.integrated_gradients(model, pc, steps=200).scores
    fine = xai.integrated_gradients(model, pc, steps=400).scores
    assert np.linalg.norm(coarse - fine) / np.linalg.norm(fine) < 0.01


def test_integrated_gradients_completeness(model, test_set):
    pc = test_set[3]
    attr, target = xai.integrated_attributions(model, pc, steps=200)
    x = pc.points
    baseline = np.broadcast_to(x.mean(axis=0), x.shape)
    gap = network.logits(model, x)[target] - network.logits(model, baseline)[target]
    assert attr.sum() == pytest.approx(gap, rel=0.02)


def test_integrated_chunking_does_not_change_result(random_model, rng):
    pts = rng.uniform(-1, 1, (40, 3))
    a, _ = xai.integrated_attributions(random_model, pts, steps=30, chunk=7)
    b, _ = xai.integrated_attributions(random_model, pts, steps=30, chunk=50)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


# -- random baseline ---------------------------------------------------------------------------


def test_random_ranking_is_seeded_permutation():
    a = xai.random_ranking(50, seed=4).scores
    assert sorted(a.tolist()) == list(range(1, 51))
    assert np.array_equal(a, xai.random_ranking(50, seed=4).scores)
    assert not np.array_equal(a, xai.random_ranking(50, seed=5).scores)


def test_random_mean_rank():
    n = 64
    ranks = [int(np.flatnonzero(xai.random_ranking(n, s).ranking() == 0)[0]) + 1 for s in range(1000)]
    assert np.mean(ranks) == pytest.approx((n + 1) / 2, rel=0.05)


def test_random_ranking_needs_points():
    with pytest.raises(ContractError):
        xai.random_ranking(0)


def test_explain_dispatch(random_model, rng):
    pts = rng.uniform(-1, 1, (20, 3))
    feats = network.features(random_model, pts)
    assert np.array_equal(xai.explain(random_model, pts, "fbi").scores, xai.fbi(feats).scores)
    assert np.array_equal(xai.explain(random_model, pts, "fbi_p", p=1).scores, xai.fbi(feats).scores)
    with pytest.raises(ContractError, match="valid methods"):
        xai.explain(random_model, pts, "lime")


# -- critical-point graph lemmas ----------------------------------------------------------------


def _cp_clouds(model, test_set):
    for pc in test_set:
        graph = data.build_knn_graph(pc, 8)
        cp = xai.critical_points(network.features(model, pc)).scores
        if graph.connected and 0 < cp.sum() < pc.n:
            yield pc, graph, cp


def test_connected_graph_has_crossing_edge(model, test_set):
    seen = 0
    for _, graph, cp in _cp_clouds(model, test_set):
        i, j = graph.edges.T
        assert (cp[i] != cp[j]).any()
        seen += 1
    assert seen > 0


def test_crossing_edges_obey_lipschitz_bound(model, test_set):
    for pc, graph, cp in _cp_clouds(model, test_set):
        i, j = graph.edges.T
        cross = cp[i] != cp[j]
        dist = np.linalg.norm(pc.points[i[cross]] - pc.points[j[cross]], axis=1)
        assert (np.abs(cp[i[cross]] - cp[j[cross]]) / dist >= 1 / graph.h).all()
