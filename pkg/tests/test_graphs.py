import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adom_affine.graphs import (
    GossipMatrix,
    GraphError,
    RankZeroError,
    ScaledSource,
    StaticSource,
    WeightedGraph,
    gamma_n,
    laplacian,
    lift,
    metropolis_gossip,
    path_graph,
    random_ring_source,
    ratio_gamma,
    reweighted_line_graph,
    select_size,
    spectrum,
    star_source,
    _line_weights,
)


def random_connected_graph(rng, n):
    # spanning tree plus random extra edges
    perm = rng.permutation(n)
    pairs = {tuple(sorted((int(perm[i]), int(perm[rng.integers(0, i)])))) for i in range(1, n)}
    for _ in range(rng.integers(0, n)):
        i, j = rng.choice(n, 2, replace=False)
        pairs.add(tuple(sorted((int(i), int(j)))))
    return WeightedGraph(n, tuple((i, j, float(rng.uniform(0.1, 2.0))) for i, j in sorted(pairs)))


class TestWeightedGraph:
    def test_rejects_self_loop(self):
        with pytest.raises(GraphError):
            WeightedGraph(2, ((0, 0, 1.0),))

    def test_rejects_duplicate(self):
        with pytest.raises(GraphError):
            WeightedGraph(2, ((0, 1, 1.0), (1, 0, 2.0)))

    def test_rejects_out_of_range(self):
        with pytest.raises(GraphError):
            WeightedGraph(2, ((0, 2, 1.0),))

    def test_json_round_trip(self):
        g = path_graph(4, [0.5, 1.0, 2.0])
        back = WeightedGraph.from_json(g.to_json())
        assert back == g
        assert json.loads(g.to_json())["n"] == 4

    def test_bfs_distances(self):
        g = path_graph(5)
        assert g.distances_from([0]) == [0, 1, 2, 3, 4]
        assert g.set_distance([0, 1], [4]) == 3

    def test_zero_weight_edge_cuts_bfs(self):
        g = _line_weights(4, 1.0)
        assert not g.is_connected()


class TestLaplacian:
    def test_single_edge(self):
        w = laplacian(WeightedGraph.from_pairs(2, [(0, 1)]))
        np.testing.assert_array_equal(w.matrix, [[1, -1], [-1, 1]])
        np.testing.assert_allclose(w.spectrum.eigenvalues, [0, 2], atol=1e-14)

    def test_path3(self):
        w = laplacian(path_graph(3))
        np.testing.assert_array_equal(w.matrix, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
        # eigenvalues 0, 1, 3
        assert w.lam_min_plus / w.lam_max == pytest.approx(1 / 3, abs=1e-14)
        assert ratio_gamma(w.matrix) == pytest.approx(gamma_n(3), abs=1e-14)

    def test_disconnected_flagged(self):
        w = laplacian(WeightedGraph.from_pairs(4, [(0, 1), (2, 3)]))
        assert w.kernel_dim == 2
        assert not w.connected
        w.check()

    def test_axioms_on_random_graphs(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            w = laplacian(random_connected_graph(rng, n))
            w.check()
            assert w.kernel_dim == 1

    def test_csv_round_trip(self):
        w = laplacian(path_graph(4, [0.3, 1.7, 2.0]))
        back = GossipMatrix.from_csv(w.to_csv())
        np.testing.assert_array_equal(back.matrix, w.matrix)


class TestMetropolis:
    def test_single_edge(self):
        w = metropolis_gossip(WeightedGraph.from_pairs(2, [(0, 1)]))
        np.testing.assert_allclose(w.matrix, [[0.5, -0.5], [-0.5, 0.5]])
        np.testing.assert_allclose(w.spectrum.eigenvalues, [0, 1], atol=1e-14)

    def test_complete3(self):
        w = metropolis_gossip(WeightedGraph.from_pairs(3, [(0, 1), (1, 2), (0, 2)]))
        m = np.eye(3) - w.matrix
        off = m[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, 1 / 3)
        np.testing.assert_allclose(w.spectrum.eigenvalues, [0, 1, 1], atol=1e-14)

    def test_kernel_and_axioms(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            w = metropolis_gossip(random_connected_graph(rng, int(rng.integers(2, 10))))
            w.check()
            assert w.lam_max < 2

    def test_ring_exceeds_one(self):
        # ring of 4: I - M has top eigenvalue 4/3, so rescaling is needed
        w = metropolis_gossip(WeightedGraph.from_pairs(4, [(0, 1), (1, 2), (2, 3), (3, 0)]))
        assert w.lam_max == pytest.approx(4 / 3)

    def test_disconnected_rejected(self):
        with pytest.raises(GraphError):
            metropolis_gossip(WeightedGraph.from_pairs(3, [(0, 1)]))


class TestSpectrum:
    def test_identity(self):
        s = spectrum(np.eye(3))
        assert s.lam_min_plus == s.lam_max == pytest.approx(1.0)

    def test_zero(self):
        s = spectrum(np.zeros((3, 3)))
        assert s.lam_max == 0 and s.lam_min_plus is None
        with pytest.raises(RankZeroError):
            s.condition

    def test_diag(self):
        s = spectrum(np.diag([0.0, 2.0, 5.0]))
        assert (s.lam_min_plus, s.lam_max) == (2.0, 5.0)

    def test_nonsymmetric_rejected(self):
        with pytest.raises(ValueError):
            spectrum(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestSources:
    def test_ring4_spectrum(self):
        src = random_ring_source(4, seed=1)
        for k in range(10):
            np.testing.assert_allclose(np.linalg.eigvalsh(src.matrix(k)), [0, 2, 2, 4], atol=1e-12)

    def test_ring3_is_complete(self):
        np.testing.assert_allclose(np.linalg.eigvalsh(random_ring_source(3).matrix(0)), [0, 3, 3], atol=1e-12)

    def test_ring_deterministic(self):
        a, b = random_ring_source(9, seed=5), random_ring_source(9, seed=5)
        np.testing.assert_array_equal(a.matrix(17), b.matrix(17))

    def test_ring_isospectral_and_bounds(self):
        src = random_ring_source(11, seed=2)
        ref = np.linalg.eigvalsh(src.matrix(0))
        for k in range(1, 30):
            ev = np.linalg.eigvalsh(src.matrix(k))
            np.testing.assert_allclose(ev, ref, atol=1e-8)
            src.emit(k).check()
        assert src.lam_min_plus == pytest.approx(ref[1])
        assert src.lam_max == pytest.approx(ref[-1])

    def test_ring_needs_three(self):
        with pytest.raises(GraphError):
            random_ring_source(2)

    def test_star3(self):
        np.testing.assert_allclose(np.linalg.eigvalsh(star_source(3).matrix(0)), [0, 1, 3], atol=1e-12)

    def test_star_cycling(self):
        src = star_source(6)
        assert [src.center(k) for k in range(4)] == [2, 3, 2, 3]

    def test_star_ratio(self):
        src = star_source(9)
        for k in range(5):
            w = src.emit(k).check()
            assert w.lam_max / w.lam_min_plus == pytest.approx(9)

    def test_star_needs_multiple_of_three(self):
        with pytest.raises(GraphError):
            star_source(4)

    def test_scaled_source(self):
        src = ScaledSource(random_ring_source(6))
        assert src.lam_max == pytest.approx(1.0)
        assert np.linalg.eigvalsh(src.matrix(3))[-1] == pytest.approx(1.0)

    def test_static_rejects_disconnected(self):
        with pytest.raises(GraphError):
            StaticSource(laplacian(WeightedGraph.from_pairs(3, [(0, 1)])))


class TestLift:
    def test_consensual_in_kernel(self):
        w = laplacian(path_graph(4))
        x = np.tile([1.0, -2.0, 0.5], 4)
        np.testing.assert_allclose(lift(w, 3).apply(x), 0, atol=1e-14)

    def test_d1_matches_matvec(self, rng):
        w = laplacian(path_graph(5))
        x = rng.standard_normal(5)
        np.testing.assert_allclose(lift(w, 1) @ x, w.matrix @ x)

    def test_two_node_example(self):
        w = laplacian(WeightedGraph.from_pairs(2, [(0, 1)]))
        out = lift(w, 2).apply(np.array([1.0, 0, 0, 0]))
        np.testing.assert_array_equal(out, [1, 0, -1, 0])
        np.testing.assert_array_equal(out, np.kron(w.matrix, np.eye(2)) @ [1, 0, 0, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            lift(np.eye(2), 2).apply(np.ones(3))


class TestGammaSequence:
    def test_values(self):
        assert gamma_n(2) == pytest.approx(1.0)
        assert gamma_n(3) == pytest.approx(1 / 3)
        assert gamma_n(4) == pytest.approx(0.171572875, abs=1e-9)

    def test_strictly_decreasing(self):
        vals = [gamma_n(n) for n in range(2, 65)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_select_size(self):
        assert select_size(1.0) == 2
        assert select_size(0.2) == 3
        # gamma_15 = 0.01105 >= 0.01 > gamma_16 = 0.00970
        assert select_size(0.01) == 15
        assert gamma_n(15) >= 0.01 > gamma_n(16)
        assert select_size(1 / 3) == 3

    def test_rejects_bad_gamma(self):
        for g in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                select_size(g)


class TestReweightedLine:
    def test_target_point_two(self):
        g, n, a = reweighted_line_graph(0.2)
        assert n == 3
        assert ratio_gamma(laplacian(g).matrix) == pytest.approx(0.2, abs=1e-8)

    def test_gamma3_endpoint(self):
        g, n, a = reweighted_line_graph(gamma_n(3))
        assert n == 3 and a == 0.0
        assert ratio_gamma(laplacian(g).matrix) == pytest.approx(1 / 3)

    def test_complete_triangle(self):
        g, n, a = reweighted_line_graph(1.0)
        assert n == 2 and g.node_count == 3 and a == pytest.approx(1.0)

    def test_bracketing(self):
        for n in (3, 5, 8):
            assert ratio_gamma(laplacian(_line_weights(n, 0.0)).matrix) == pytest.approx(gamma_n(n))
            assert ratio_gamma(laplacian(_line_weights(n, 1.0)).matrix) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=1e-3, max_value=1.0))
    def test_hits_target(self, target):
        g, _, _ = reweighted_line_graph(target)
        assert abs(ratio_gamma(laplacian(g).matrix) - target) <= 1e-8

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            reweighted_line_graph(0.0)
