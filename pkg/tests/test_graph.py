import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgcn import autodiff as ad
from pgcn.graph import (GraphDomainError, RoadGraph, SelfAdaptiveEmbeddings, load_edge_list,
                        normalize_window, progressive_adjacency, self_adaptive_adjacency,
                        transition_matrix, write_edge_list, write_node_index)


class TestTransition:
    def test_swap(self):
        tp = transition_matrix(RoadGraph([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(tp.forward, [[0, 1], [1, 0]])
        assert tp.undirected
        np.testing.assert_array_equal(tp.forward, tp.backward)

    def test_proportional_row(self):
        tp = transition_matrix(RoadGraph([[2, 0, 2], [0, 0, 1], [1, 0, 0]]))
        np.testing.assert_array_equal(tp.forward[0], [0.5, 0, 0.5])

    def test_isolated_node(self):
        tp = transition_matrix(RoadGraph([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
        np.testing.assert_array_equal(tp.forward[2], 0.0)
        assert np.all(np.isfinite(tp.forward))

    def test_directed_backward_uses_transpose(self):
        A = np.array([[0, 1, 1], [0, 0, 1], [1, 0, 0]], float)
        tp = transition_matrix(RoadGraph(A))
        assert not tp.undirected
        np.testing.assert_allclose(tp.backward.sum(axis=1), 1.0)
        np.testing.assert_allclose(tp.backward[2], [0.5, 0.5, 0.0])

    def test_negative_rejected(self):
        with pytest.raises(GraphDomainError):
            transition_matrix(np.array([[0.0, -1.0], [1.0, 0.0]]))

    @given(st.integers(2, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_idempotent_on_stochastic(self, n, seed):
        A = np.random.default_rng(seed).uniform(0.1, 1.0, size=(n, n))
        P = transition_matrix(RoadGraph(A)).forward
        np.testing.assert_allclose(transition_matrix(RoadGraph(P)).forward, P, rtol=0, atol=1e-15)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


class TestEdgeList:
    def test_first_seen_order_and_default_weight(self, tmp_path):
        f = tmp_path / "edges.csv"
        f.write_text("from,to,weight\nb,a,2.5\na,c,\n")
        g = load_edge_list(f)
        assert g.names == ["b", "a", "c"]
        assert g.adjacency[0, 1] == 2.5 and g.adjacency[1, 2] == 1.0
        write_node_index(g, tmp_path / "node_index.csv")
        assert (tmp_path / "node_index.csv").read_text() == "index,name\n0,b\n1,a\n2,c\n"

    def test_fixed_order(self, tmp_path):
        f = tmp_path / "edges.csv"
        f.write_text("from,to\nb,a\n")
        g = load_edge_list(f, node_names=["a", "b", "c"])
        assert g.adjacency[1, 0] == 1.0 and g.num_nodes == 3
        with pytest.raises(GraphDomainError):
            load_edge_list(f, node_names=["a"])

    def test_round_trip(self, tmp_path):
        g = RoadGraph(np.array([[0, 0.3], [1.7, 0]]), names=["x", "y"])
        write_edge_list(g, tmp_path / "e.csv")
        np.testing.assert_array_equal(load_edge_list(tmp_path / "e.csv").adjacency, g.adjacency)


class TestNormalizeWindow:
    def test_ramp(self):
        np.testing.assert_allclose(normalize_window(np.array([0.0, 1.0, 2.0])), [0, 0.4472, 0.8944], atol=5e-5)

    def test_constant(self):
        np.testing.assert_array_equal(normalize_window(np.array([5.0, 5.0, 5.0])), [0, 0, 0])

    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8), st.booleans())
    @settings(max_examples=50, deadline=None)
    def test_fixed_point(self, middle, _):
        x = np.sort(np.array([0.0] + middle + [1.0]))
        once = normalize_window(x)
        np.testing.assert_allclose(normalize_window(once), once, atol=1e-12)
        assert abs(np.linalg.norm(once) - 1.0) < 1e-12


def eye_adjustor(T):
    return ad.Parameter(np.eye(T), "adjustor")


class TestProgressive:
    def test_hand_case(self):
        X = np.array([[[0.0, 1.0, 2.0], [2.0, 1.0, 0.0]]])
        pa = progressive_adjacency(X, eye_adjustor(3))
        np.testing.assert_allclose(pa.scores.data[0, 0], [1.0, 0.2], atol=1e-12)
        np.testing.assert_allclose(pa.matrix.data[0, 0], [0.6900, 0.3100], atol=5e-5)

    def test_identical_windows_give_uniform_rows(self, rng):
        w = rng.normal(size=6)
        X = np.tile(w, (2, 5, 1))
        A = progressive_adjacency(X, eye_adjustor(6)).matrix.data
        np.testing.assert_allclose(A, 1 / 5, atol=1e-15)

    def test_identical_pair_score_equals_self(self, rng):
        X = rng.normal(size=(1, 4, 6))
        X[0, 2] = X[0, 0]
        S = progressive_adjacency(X, eye_adjustor(6)).scores.data[0]
        assert abs(S[0, 2] - S[0, 0]) < 1e-12 and abs(S[0, 0] - 1.0) < 1e-12

    def test_symmetric_adjustor_gives_symmetric_scores(self, rng):
        W = rng.normal(size=(6, 6))
        S = progressive_adjacency(rng.normal(size=(3, 5, 6)), ad.Parameter(W + W.T)).scores.data
        np.testing.assert_allclose(S, np.swapaxes(S, 1, 2), atol=1e-12)

    def test_window_mismatch(self, rng):
        with pytest.raises(ad.DimensionError):
            progressive_adjacency(rng.normal(size=(1, 3, 5)), eye_adjustor(6))

    def test_gradient_reaches_adjustor(self, rng):
        X = rng.normal(size=(2, 4, 5))
        W = ad.Parameter(np.eye(5) + 0.1 * rng.normal(size=(5, 5)))
        target = ad.Tensor(rng.normal(size=(2, 4, 4)))
        err = ad.grad_check(lambda: ad.tsum(ad.hadamard(progressive_adjacency(X, W).matrix, target)), [W])
        assert err < 1e-4


class TestSelfAdaptive:
    def test_zero_embeddings_uniform(self):
        emb = SelfAdaptiveEmbeddings(ad.Parameter(np.zeros((4, 3))), ad.Parameter(np.zeros((4, 3))))
        np.testing.assert_allclose(self_adaptive_adjacency(emb).data, 0.25, atol=1e-15)

    def test_hand_case(self):
        emb = SelfAdaptiveEmbeddings(ad.Parameter([[1.0], [2.0]]), ad.Parameter([[1.0], [0.0]]))
        np.testing.assert_allclose(self_adaptive_adjacency(emb).data,
                                   [[0.7311, 0.2689], [0.8808, 0.1192]], atol=5e-5)

    def test_rows_sum_to_one_and_grads(self, rng):
        emb = SelfAdaptiveEmbeddings(ad.Parameter(rng.normal(size=(5, 3))), ad.Parameter(rng.normal(size=(5, 3))))
        A = self_adaptive_adjacency(emb).data
        assert np.all(np.abs(A.sum(axis=1) - 1) <= 1e-12) and np.all(A > 0)
        w = ad.Tensor(rng.normal(size=(5, 5)))
        err = ad.grad_check(lambda: ad.tsum(ad.hadamard(self_adaptive_adjacency(emb), w)),
                            [emb.source, emb.target])
        assert err < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            SelfAdaptiveEmbeddings(ad.Parameter(np.zeros((4, 3))), ad.Parameter(np.zeros((4, 2))))
