import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialtensor.simgen import ScenarioConfig, generate
from spatialtensor.spatial_basis import (
    SpatialGraph, captured_energy, eigenbasis, graph_basis, grid_graph, knn_graph,
    normalized_laplacian, smoothness_profile,
)
from spatialtensor.tensor_core import ContractError


def brute_knn_edges(X, k):
    n = len(X)
    edges = set()
    for i in range(n):
        cand = sorted((float(np.hypot(*(X[i] - X[j]))), j) for j in range(n) if j != i)
        for _, j in cand[:k]:
            edges.add((min(i, j), max(i, j)))
    return edges


def edge_set(g):
    return {tuple(map(int, e)) for e in g.edges}


def random_connected_graph(rng, n, extra):
    # random spanning tree plus extra chords
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    for _ in range(extra):
        a, b = rng.choice(n, 2, replace=False)
        edges.append((int(a), int(b)))
    return SpatialGraph(n, np.array(edges))


class TestGraphs:
    def test_collinear_k1(self):
        g = knn_graph(np.array([[0.0, 0], [1, 0], [2, 0], [3, 0]]), 1)
        assert edge_set(g) == {(0, 1), (1, 2), (2, 3)}

    @pytest.mark.parametrize("seed,k", [(0, 1), (1, 3), (2, 4), (3, 6)])
    def test_knn_matches_pairwise_enumeration(self, seed, k):
        X = np.random.default_rng(seed).uniform(size=(40, 2))
        assert edge_set(knn_graph(X, k)) == brute_knn_edges(X, k)

    @given(st.integers(0, 1000), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_knn_simple_symmetric(self, seed, k):
        X = np.random.default_rng(seed).uniform(size=(25, 2))
        g = knn_graph(X, k)
        A = g.adjacency()
        assert np.all(np.diag(A) == 0)
        assert np.array_equal(A, A.T)
        assert g.degrees().min() >= k

    def test_knn_mean_degree_exceeds_k(self):
        X = np.random.default_rng(0).uniform(size=(500, 2))
        assert knn_graph(X, 4).degrees().mean() > 4

    def test_knn_ties_on_lattice_break_by_index(self):
        pts = grid_graph(5, 5).centroids
        assert edge_set(knn_graph(pts, 4)) == brute_knn_edges(pts, 4)
        assert edge_set(knn_graph(pts, 4)) == edge_set(knn_graph(pts.copy(), 4))

    @pytest.mark.parametrize("k", [0, 4])
    def test_knn_invalid_k(self, k):
        with pytest.raises(ContractError):
            knn_graph(np.zeros((4, 2)) + np.arange(4)[:, None], k)

    def test_grid_smallest(self):
        assert edge_set(grid_graph(1, 2)) == {(0, 1)}

    def test_grid_edge_count(self):
        g = grid_graph(20, 20)
        assert g.n_nodes == 400 and len(g.edges) == 2 * 20 * 19
        count = sum(1 for a, b in itertools.combinations(range(400), 2)
                    if abs(a // 20 - b // 20) + abs(a % 20 - b % 20) == 1)
        assert count == len(g.edges)

    def test_grid_degrees(self):
        d = grid_graph(3, 3).degrees()
        assert d[0] == 2 and d[4] == 4 and d[1] == 3

    def test_grid_centroids_are_lattice(self):
        g = grid_graph(2, 3)
        assert np.array_equal(g.centroids[5], [2.0, 1.0])

    def test_rejects_self_loop(self):
        with pytest.raises(ContractError):
            SpatialGraph(3, np.array([[1, 1]]))

    def test_duplicate_and_reversed_edges_collapse(self):
        g = SpatialGraph(3, np.array([[1, 0], [0, 1], [2, 1]]))
        assert edge_set(g) == {(0, 1), (1, 2)}


class TestLaplacian:
    def test_single_edge(self):
        Q = normalized_laplacian(SpatialGraph(2, np.array([[0, 1]])))
        assert np.array_equal(Q, [[1.0, -1.0], [-1.0, 1.0]])

    def test_path3_spectrum(self):
        basis = graph_basis(SpatialGraph(3, np.array([[0, 1], [1, 2]])))
        assert np.allclose(basis.eigenvalues, [0.0, 1.0, 2.0], atol=1e-8)

    def test_hand_matrix_path3(self):
        Q = normalized_laplacian(SpatialGraph(3, np.array([[0, 1], [1, 2]])))
        h = -1 / np.sqrt(2)
        assert np.allclose(Q, [[1, h, 0], [h, 1, h], [0, h, 1]], atol=1e-15)

    @given(st.integers(0, 500))
    @settings(max_examples=25, deadline=None)
    def test_exact_symmetry_and_spectrum_range(self, seed):
        g = random_connected_graph(np.random.default_rng(seed), 30, 20)
        Q = normalized_laplacian(g)
        assert np.max(np.abs(Q - Q.T)) == 0.0
        vals = graph_basis(g).eigenvalues
        assert vals.min() >= -1e-8 and vals.max() <= 2 + 1e-8

    def test_isolated_node(self):
        with pytest.raises(ContractError):
            normalized_laplacian(SpatialGraph(3, np.array([[0, 1]])))

    def test_disconnected_graph_rejected(self):
        with pytest.raises(ContractError):
            graph_basis(SpatialGraph(4, np.array([[0, 1], [2, 3]])))


class TestEigenbasis:
    def test_identity(self):
        b = eigenbasis(np.eye(4))
        assert np.allclose(b.eigenvalues, 1.0)
        assert np.allclose(np.abs(b.eigenvectors), np.eye(4)[:, np.argmax(np.abs(b.eigenvectors), axis=0)])
        assert np.all(b.eigenvectors.max(axis=0) == 1.0)

    def test_grid_null_vector(self):
        g = grid_graph(20, 20)
        b = graph_basis(g)
        assert abs(b.eigenvalues[0]) < 1e-10
        d = np.sqrt(g.degrees())
        assert np.allclose(b.eigenvectors[:, 0], d / np.linalg.norm(d), atol=1e-10)

    @given(st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_reconstruction_and_orthonormality(self, seed):
        g = random_connected_graph(np.random.default_rng(seed), 25, 15)
        Q = normalized_laplacian(g)
        b = graph_basis(g)
        Phi = b.eigenvectors
        assert np.max(np.abs(Q - Phi @ np.diag(b.eigenvalues) @ Phi.T)) <= 1e-8
        assert np.max(np.abs(Phi.T @ Phi - np.eye(25))) <= 1e-8
        assert np.all(np.diff(b.eigenvalues) >= -1e-12)

    def test_sign_convention(self):
        b = graph_basis(grid_graph(6, 7))
        V = b.eigenvectors
        for j in range(V.shape[1]):
            m = np.abs(V[:, j])
            first = np.argmax(m >= m.max() - 1e-12)
            assert V[first, j] > 0

    def test_non_symmetric(self):
        with pytest.raises(ContractError):
            eigenbasis(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_read_only(self):
        b = eigenbasis(np.eye(3))
        with pytest.raises(ValueError):
            b.eigenvectors[0, 0] = 2.0

    def test_columns_zero_based(self):
        b = graph_basis(grid_graph(3, 3))
        assert np.array_equal(b.columns([1, 2]), b.eigenvectors[:, 1:3])
        assert np.array_equal(b.first(2), b.eigenvectors[:, :2])


class TestSmoothness:
    def test_single_eigenvector(self):
        b = graph_basis(grid_graph(4, 5))
        prof = smoothness_profile(b, b.eigenvectors[:, 2])
        expected = np.zeros(20)
        expected[2] = 1.0
        assert np.allclose(prof, expected, atol=1e-12)

    def test_null_direction_signal(self):
        g = grid_graph(4, 4)
        b = graph_basis(g)
        prof = smoothness_profile(b, np.sqrt(g.degrees()))
        assert prof[0] > 0 and np.allclose(prof[1:], 0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_generator_confounder_energy(self, seed):
        ds = generate(ScenarioConfig(rows=12, cols=12, O=2, seed=seed))
        prof = smoothness_profile(ds.basis, ds.S[:, 0])
        assert captured_energy(prof, ds.config.j_max) >= 0.9

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            smoothness_profile(graph_basis(grid_graph(2, 2)), np.ones(5))
