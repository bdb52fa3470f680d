"""Spatial adjacency graphs and the normalized-Laplacian eigenbasis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .tensor_core import ContractError


@dataclass(frozen=True)
class SpatialGraph:
    """Undirected simple graph on ``n_nodes`` nodes.

    ``edges`` is an (E, 2) integer array with ``i < j`` per row, sorted
    lexicographically.
    """

    n_nodes: int
    edges: np.ndarray
    centroids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n_nodes):
            raise ContractError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise ContractError("self-loops are not allowed")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
        object.__setattr__(self, "edges", e)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes))
        A[self.edges[:, 0], self.edges[:, 1]] = 1.0
        A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def n_components(self) -> int:
        n = self.n_nodes
        A = coo_matrix(
            (np.ones(len(self.edges)), (self.edges[:, 0], self.edges[:, 1])), shape=(n, n)
        )
        return int(connected_components(A, directed=False)[0])

    def is_connected(self) -> bool:
        return self.n_components() == 1


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    def first(self, k: int) -> np.ndarray:
        return self.eigenvectors[:, :k]

    def columns(self, idx) -> np.ndarray:
        """Eigenvectors at 0-based indices ``idx`` (N x len(idx))."""
        idx = np.asarray(idx, dtype=np.int64)
        return self.eigenvectors[:, idx]


def knn_graph(centroids, k: int) -> SpatialGraph:
    """k-nearest-neighbour graph, symmetrized by the union of directed edges.

    Distance ties are broken toward the lower node index, so the result does
    not depend on the order of equidistant candidates.
    """
    X = np.asarray(centroids, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ContractError("centroids must be an N x 2 array")
    if not np.all(np.isfinite(X)):
        raise ContractError("centroids must be finite")
    n = X.shape[0]
    if k < 1 or k >= n:
        raise ContractError(f"need 1 <= k < N, got k={k}, N={n}")
    tree = cKDTree(X)
    # over-query so ties at the k-th distance can be resolved by index
    m = min(n, k + 1 + 8)
    edges = []
    for i in range(n):
        while True:
            d, j = tree.query(X[i], k=m)
            d = np.atleast_1d(d)
            j = np.atleast_1d(j)
            keep = j != i
            d, j = d[keep], j[keep]
            order = np.lexsort((j, d))
            d, j = d[order], j[order]
            kth = d[k - 1]
            if m == n or d[-1] > kth:
                break
            m = min(n, 2 * m)
        edges.extend((i, int(jj)) for jj in j[:k])
    return SpatialGraph(n, np.array(edges), centroids=X)


def grid_graph(rows: int, cols: int) -> SpatialGraph:
    """Rook (4-neighbour) lattice; node id = r * cols + c."""
    if rows < 1 or cols < 1:
        raise ContractError("rows and cols must be >= 1")
    ids = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.column_stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()])
    vert = np.column_stack([ids[:-1, :].ravel(), ids[1:, :].ravel()])
    edges = np.vstack([horiz, vert]) if rows * cols > 1 else np.empty((0, 2), int)
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    centroids = np.column_stack([cc, rr]).astype(np.float64)
    return SpatialGraph(rows * cols, edges, centroids=centroids)


def normalized_laplacian(g: SpatialGraph) -> np.ndarray:
    """``I - D^{-1/2} A D^{-1/2}``."""
    A = g.adjacency()
    deg = A.sum(axis=1)
    if np.any(deg == 0):
        bad = np.flatnonzero(deg == 0)[:10].tolist()
        raise ContractError(f"isolated nodes have no normalized Laplacian: {bad}")
    s = 1.0 / np.sqrt(deg)
    Q = np.eye(g.n_nodes) - s[:, None] * A * s[None, :]
    return 0.5 * (Q + Q.T)


def eigenbasis(q) -> SpectralBasis:
    """Full symmetric eigendecomposition with ascending eigenvalues.

    Each eigenvector is signed so its largest-magnitude entry (first such
    index on ties) is positive.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ContractError("expected a square matrix")
    if not np.allclose(q, q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(q).max())):
        raise ContractError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(q)
    mag = np.abs(vecs)
    # treat near-equal magnitudes as ties so the sign rule is stable
    top = mag.max(axis=0)
    pivot = np.argmax(mag >= top[None, :] - 1e-12, axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    vecs = vecs * signs[None, :]
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return SpectralBasis(vals, vecs)


def graph_basis(g: SpatialGraph) -> SpectralBasis:
    """Eigenbasis of the normalized Laplacian of a connected graph."""
    if not g.is_connected():
        raise ContractError(
            f"graph has {g.n_components()} connected components; a connected graph is required"
        )
    return eigenbasis(normalized_laplacian(g))


def smoothness_profile(basis: SpectralBasis, signal) -> np.ndarray:
    """Absolute spectral coefficients ``|phi_j^T signal|`` for every j."""
    s = np.asarray(signal, dtype=np.float64).ravel()
    if s.shape[0] != basis.n:
        raise ContractError(f"signal length {s.shape[0]} != basis size {basis.n}")
    return np.abs(basis.eigenvectors.T @ s)


def captured_energy(profile, k: int) -> float:
    """Fraction of squared spectral mass in the first ``k`` coefficients."""
    p2 = np.square(np.asarray(profile, dtype=np.float64))
    total = p2.sum()
    return float(p2[:k].sum() / total) if total > 0 else 1.0
