"""Adjacency structures: road-graph transitions, self-adaptive and progressive graphs."""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._accel import kernels


class GraphDomainError(ValueError):
    pass


@dataclass
class RoadGraph:
    """Directed sensor graph with dense nonnegative adjacency ``A``."""

    adjacency: np.ndarray
    names: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n):
            raise ad.DimensionError(f"adjacency must be square, got {self.adjacency.shape}")
        if not self.names:
            self.names = [str(i) for i in range(n)]
        if not self.edges:
            src, dst = np.nonzero(self.adjacency)
            self.edges = [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(src, dst)]

    @property
    def num_nodes(self):
        return self.adjacency.shape[0]

    @property
    def directed(self):
        return not np.allclose(self.adjacency, self.adjacency.T, rtol=0.0, atol=1e-12)


@dataclass
class TransitionPair:
    forward: np.ndarray
    backward: np.ndarray
    undirected: bool


@dataclass
class SelfAdaptiveEmbeddings:
    source: ad.Parameter
    target: ad.Parameter

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ad.DimensionError(
                f"embedding shapes differ: {self.source.shape} vs {self.target.shape}")

    @property
    def dim(self):
        return self.source.shape[1]


@dataclass
class ProgressiveAdjacency:
    """Per-sample row-stochastic adjacency plus the pre-softmax scores."""

    matrix: ad.Tensor
    scores: ad.Tensor


def load_edge_list(path, node_names=None):
    """Read a ``from,to,weight`` CSV into a RoadGraph.

    With ``node_names`` the dense index order follows that list and unknown
    names are rejected; otherwise names are indexed in first-seen order.
    """
    path = Path(path)
    index = {name: i for i, name in enumerate(node_names)} if node_names is not None else {}
    frozen = node_names is not None
    raw = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"from", "to"} <= set(reader.fieldnames):
            raise GraphDomainError(f"{path}: header must contain 'from,to[,weight]'")
        for lineno, row in enumerate(reader, start=2):
            src, dst = row["from"].strip(), row["to"].strip()
            weight = row.get("weight")
            w = 1.0 if weight is None or weight.strip() == "" else float(weight)
            if w < 0:
                raise GraphDomainError(f"{path}:{lineno}: negative weight {w}")
            for name in (src, dst):
                if name not in index:
                    if frozen:
                        raise GraphDomainError(f"{path}:{lineno}: unknown node {name!r}")
                    index[name] = len(index)
            raw.append((index[src], index[dst], w))
    names = list(index)
    A = np.zeros((len(names), len(names)))
    for i, j, w in raw:
        A[i, j] += w
    return RoadGraph(A, names=names, edges=raw)


def write_edge_list(graph, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", "weight"])
        for i, j, weight in graph.edges:
            w.writerow([graph.names[i], graph.names[j], repr(float(weight))])


def write_node_index(graph, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "name"])
        for i, name in enumerate(graph.names):
            w.writerow([i, name])


def _row_normalize(A):
    sums = A.sum(axis=1, keepdims=True)
    return np.divide(A, sums, out=np.zeros_like(A), where=sums > 0)


def transition_matrix(graph):
    """Forward ``A / rowsum(A)`` and backward (from ``A.T``) transitions.

    Rows of isolated nodes are left at zero.
    """
    A = graph.adjacency if isinstance(graph, RoadGraph) else np.asarray(graph, dtype=np.float64)
    if np.any(A < 0):
        raise GraphDomainError("adjacency has negative entries")
    undirected = bool(np.allclose(A, A.T, rtol=0.0, atol=1e-12))
    fwd = _row_normalize(A)
    bwd = fwd.copy() if undirected else _row_normalize(A.T)
    return TransitionPair(fwd, bwd, undirected)


def normalize_window(x):
    """Min-max scale each window along the last axis, then scale to unit length.

    Constant windows map to the zero vector.

    >>> normalize_window(np.array([0.0, 1.0, 2.0])).round(4)
    array([0.    , 0.4472, 0.8944])
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    return kernels.normalize_rows(x)


def init_adjustor(window, rng, noise=0.01):
    """Identity plus uniform noise, so the initial graph is close to plain cosine similarity."""
    return ad.Parameter(np.eye(window) + rng.uniform(-noise, noise, size=(window, window)), name="adjustor")


def init_embeddings(num_nodes, dim, rng):
    return SelfAdaptiveEmbeddings(
        ad.Parameter(rng.normal(size=(num_nodes, dim)), name="embed_source"),
        ad.Parameter(rng.normal(size=(num_nodes, dim)), name="embed_target"),
    )


def progressive_adjacency(windows, adjustor):
    """Build ``softmax_j(relu(x_i^T W x_j))`` for every sample.

    ``windows`` holds the primary channel with shape ``(B, N, T)``; gradients
    flow into ``adjustor`` only.
    """
    windows = windows.data if isinstance(windows, ad.Tensor) else np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3:
        raise ad.DimensionError(f"expected windows of shape (B, N, T), got {windows.shape}")
    T = windows.shape[-1]
    if adjustor.shape != (T, T):
        raise ad.DimensionError(f"window length {T} does not match adjustor shape {adjustor.shape}")
    unit = normalize_window(windows)
    unit_t = ad.Tensor(np.ascontiguousarray(np.swapaxes(unit, 1, 2)))
    scores = ad.matmul(ad.matmul(ad.Tensor(unit), adjustor), unit_t)
    return ProgressiveAdjacency(ad.row_softmax(ad.relu(scores)), scores)


def self_adaptive_adjacency(emb):
    logits = ad.matmul(emb.source, ad.transpose(emb.target, (1, 0)))
    return ad.row_softmax(ad.relu(logits))
