"""Subject-similarity graph: locally scaled exponential kernel over z-scored
features, thresholded sparse edges, and symmetric normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass
class KernelParams:
    k_neighbors: int = 20
    mu: float = 0.5
    edge_threshold: float = 1e-9
    # literal reading where the kernel's rho is already the squared distance
    rho_is_squared: bool = False

    def __post_init__(self):
        if not 0.1 <= self.mu <= 1.0:
            raise GraphError(f"mu must be in [0.1, 1.0], got {self.mu}")
        if self.k_neighbors < 1:
            raise GraphError("k_neighbors must be >= 1")
        if self.edge_threshold <= 0:
            raise GraphError("edge_threshold must be positive")


@dataclass
class SimilarityGraph:
    """Weighted undirected graph over subjects; each edge stored once (i < j)."""

    n: int
    src: np.ndarray      # edge endpoint i, with src < dst
    dst: np.ndarray      # edge endpoint j
    weight: np.ndarray
    degree: np.ndarray   # weighted degree, length n
    feature_dim: int
    params: KernelParams = field(default_factory=KernelParams)

    @property
    def n_edges(self) -> int:
        return self.src.size

    def directed(self):
        """Both orientations of every edge: (rows, cols, weights)."""
        rows = np.concatenate([self.src, self.dst])
        cols = np.concatenate([self.dst, self.src])
        w = np.concatenate([self.weight, self.weight])
        return rows, cols, w

    def adjacency(self) -> sparse.csr_matrix:
        rows, cols, w = self.directed()
        return sparse.csr_matrix((w, (rows, cols)), shape=(self.n, self.n))


def pairwise_sq_distance(x: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, exactly symmetric, zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    gram = x @ x.T
    gram = (gram + gram.T) * 0.5
    sq = np.diag(gram)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def knn_mean_distance(d2: np.ndarray, k: int) -> np.ndarray:
    """Mean Euclidean distance from each vertex to its k nearest others."""
    n = d2.shape[0]
    if k >= n:
        raise GraphError(f"k_neighbors={k} must be < number of subjects {n}")
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, np.inf)
    part = np.partition(dist, k - 1, axis=1)[:, :k]
    return part.mean(axis=1)


def _kernel_matrix(d2: np.ndarray, rhobar: np.ndarray, params: KernelParams):
    """Dense weight matrix; entries where sigma == 0 and rho == 0 are +inf
    (resolved by build_graph), sigma == 0 with rho > 0 gives 0.
    """
    if params.rho_is_squared:
        rho = d2
        rho_sq = d2 * d2
    else:
        rho = np.sqrt(d2)
        rho_sq = d2
    sigma = params.mu * (rhobar[:, None] + rhobar[None, :] + rho) / 3.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w = np.exp(-rho_sq / (2.0 * sigma * sigma)) / np.sqrt(2.0 * np.pi * sigma * sigma)
    zero_sigma = sigma == 0.0
    w[zero_sigma & (rho > 0.0)] = 0.0
    w[zero_sigma & (rho == 0.0)] = np.inf
    return w


def kernel_weight(i: int, j: int, d2: np.ndarray, rhobar: np.ndarray,
                  params: KernelParams) -> float:
    """Similarity weight for one pair (mainly for tests; build_graph vectorizes)."""
    if i == j:
        raise GraphError("kernel weight is defined for distinct subjects")
    if params.rho_is_squared:
        rho, rho_sq = d2[i, j], d2[i, j] ** 2
    else:
        rho, rho_sq = np.sqrt(d2[i, j]), d2[i, j]
    sigma = params.mu * (rhobar[i] + rhobar[j] + rho) / 3.0
    if sigma == 0.0:
        return float("inf") if rho == 0.0 else 0.0
    return float(np.exp(-rho_sq / (2.0 * sigma ** 2)) / np.sqrt(2.0 * np.pi * sigma ** 2))


def build_graph(x: np.ndarray, params: KernelParams | None = None) -> SimilarityGraph:
    """Construct the similarity graph: an edge is kept iff its kernel weight
    strictly exceeds params.edge_threshold.
    """
    params = params or KernelParams()
    x = np.asarray(x, dtype=np.float64)
    n, f = x.shape
    if n == 1:
        return SimilarityGraph(1, np.empty(0, np.intp), np.empty(0, np.intp),
                               np.empty(0), np.zeros(1), f, params)
    d2 = pairwise_sq_distance(x)
    rhobar = knn_mean_distance(d2, min(params.k_neighbors, n - 1))
    if params.rho_is_squared:
        rhobar = rhobar ** 2
    w = _kernel_matrix(d2, rhobar, params)

    iu, ju = np.triu_indices(n, k=1)
    wu = w[iu, ju]
    if np.isinf(wu).any():
        # coincident points with zero sigma: give them the largest finite weight
        finite = wu[np.isfinite(wu)]
        cap = finite.max() if finite.size else 1.0
        log.warning("coincident subjects with zero kernel scale; "
                    "assigning max finite weight %g", cap)
        wu = np.where(np.isinf(wu), cap, wu)
    keep = wu > params.edge_threshold
    src, dst, weight = iu[keep], ju[keep], wu[keep]

    degree = np.zeros(n)
    np.add.at(degree, src, weight)
    np.add.at(degree, dst, weight)
    return SimilarityGraph(n, src, dst, weight, degree, f, params)


def sym_normalize(g: SimilarityGraph) -> sparse.csr_matrix:
    """D^{-1/2} A D^{-1/2} with the convention 1/sqrt(0) = 0 for isolated
    vertices."""
    rows, cols, w = g.directed()
    # single square root of the degree product so that unit k-regular graphs
    # normalize to exactly 1/k
    prod = g.degree[rows] * g.degree[cols]
    vals = np.where(prod > 0, w / np.sqrt(np.where(prod > 0, prod, 1.0)), 0.0)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(g.n, g.n))


def graph_stats(g: SimilarityGraph) -> dict:
    isolated = int((g.degree == 0).sum())
    quantiles = (np.quantile(g.weight, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist()
                 if g.n_edges else [0.0] * 5)
    mean_deg = 2.0 * g.n_edges / g.n if g.n else 0.0
    return {
        "n_vertices": g.n,
        "n_edges": g.n_edges,
        "mean_degree": mean_deg,
        "n_isolated": isolated,
        "weight_quantiles": quantiles,
    }


def save_graph(g: SimilarityGraph, path) -> None:
    """Edge-list text format with a header carrying n, F, and kernel params.

    Weights use repr so the round trip is bit-exact.
    """
    p = g.params
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={g.n} f={g.feature_dim} k={p.k_neighbors} mu={p.mu!r} "
                 f"threshold={p.edge_threshold!r} rho_is_squared={int(p.rho_is_squared)}\n")
        for i, j, w in zip(g.src, g.dst, g.weight):
            fh.write(f"{i},{j},{float(w)!r}\n")


def load_graph(path) -> SimilarityGraph:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise GraphError(f"{path}: missing graph header line")
        fields = dict(tok.split("=", 1) for tok in header[2:].split())
        n = int(fields["n"])
        params = KernelParams(k_neighbors=int(fields["k"]), mu=float(fields["mu"]),
                              edge_threshold=float(fields["threshold"]),
                              rho_is_squared=bool(int(fields["rho_is_squared"])))
        src, dst, weight = [], [], []
        for line in fh:
            i, j, w = line.rstrip("\n").split(",")
            src.append(int(i))
            dst.append(int(j))
            weight.append(float(w))
    src = np.asarray(src, dtype=np.intp)
    dst = np.asarray(dst, dtype=np.intp)
    weight = np.asarray(weight, dtype=np.float64)
    degree = np.zeros(n)
    np.add.at(degree, src, weight)
    np.add.at(degree, dst, weight)
    return SimilarityGraph(n, src, dst, weight, degree, int(fields["f"]), params)
