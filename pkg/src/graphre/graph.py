"""Immutable attributed graphs, node splits, file I/O and propagation matrices.

A :class:`Graph` stores an undirected simple graph as a sorted ``(K, 2)`` array
of ``u < v`` pairs together with a dense feature matrix and integer labels.
Every operation is pure: flips and perturbations return new graphs.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import InvalidFlipError, ParseError, SplitError, ValidationError

logger = logging.getLogger(__name__)

EDGE_FILE = "edges.txt"
FEATURE_FILE = "features.csv"
LABEL_FILE = "labels.csv"


class SelfLoopWarning(UserWarning):
    """Emitted when self-loops are dropped from an edge list."""

    def __init__(self, count):
        self.count = count
        super().__init__(f"dropped {count} self-loop(s) from edge list")


def _canonical_edges(edges, num_nodes):
    """Return sorted unique ``u < v`` pairs and the number of self-loops dropped."""
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        bad = arr[(arr < 0).any(axis=1) | (arr >= num_nodes).any(axis=1)][0]
        raise ValidationError(f"edge ({bad[0]}, {bad[1]}) references a node outside 0..{num_nodes - 1}")
    loops = arr[:, 0] == arr[:, 1]
    arr = np.sort(arr[~loops], axis=1)
    if arr.size:
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2), int(loops.sum())


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph.

    Use :meth:`Graph.build` to construct one from arbitrary pair lists; the
    raw constructor expects already-canonical edges.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        for arr in (self.edges, self.features, self.labels):
            arr.setflags(write=False)
        if self.features.shape[0] != self.num_nodes:
            raise ValidationError(
                f"feature matrix has {self.features.shape[0]} rows but graph has {self.num_nodes} nodes")
        if self.labels.shape != (self.num_nodes,):
            raise ValidationError(f"expected {self.num_nodes} labels, got {self.labels.shape[0]}")
        if self.num_nodes and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in 0..{self.num_classes - 1}")

    @classmethod
    def build(cls, num_nodes, edges, features=None, labels=None, num_classes=None) -> "Graph":
        edges, loops = _canonical_edges(edges, num_nodes)
        if loops:
            warnings.warn(SelfLoopWarning(loops), stacklevel=2)
        if features is None:
            features = np.eye(num_nodes)
        features = np.array(features, dtype=np.float64, copy=True)
        if features.ndim == 1:
            features = features[:, None]
        if labels is None:
            labels = np.zeros(num_nodes, dtype=np.int64)
        labels = np.array(labels, dtype=np.int64, copy=True)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if num_nodes else 1
        return cls(int(num_nodes), edges, features, labels, int(num_classes))

    def with_edges(self, edges) -> "Graph":
        """Same nodes, features and labels with a different (canonical) edge set."""
        edges, _ = _canonical_edges(edges, self.num_nodes)
        return Graph(self.num_nodes, edges, self.features, self.labels, self.num_classes)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    @cached_property
    def edge_set(self) -> frozenset:
        return frozenset(map(tuple, self.edges.tolist()))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric binary adjacency (no self-loops) as CSR."""
        n = self.num_nodes
        u, v = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(u))
        adj = sp.csr_matrix((data, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n))
        adj.sort_indices()
        return adj

    @cached_property
    def neighbors(self) -> tuple:
        adj = self.adjacency
        return tuple(frozenset(adj.indices[adj.indptr[i]:adj.indptr[i + 1]].tolist()) for i in range(self.num_nodes))

    def has_edge(self, u, v) -> bool:
        return (min(u, v), max(u, v)) in self.edge_set

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and self.num_classes == other.num_classes
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    __hash__ = None

    def __repr__(self):
        return (f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
                f"num_features={self.num_features}, num_classes={self.num_classes})")


@dataclass(frozen=True)
class NodeSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for arr in (self.train, self.val, self.test):
            arr.setflags(write=False)
        if len(self.train) == 0:
            raise SplitError("training set is empty")
        joined = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(joined)) != len(joined):
            raise SplitError("train/val/test sets overlap")

    @classmethod
    def from_lists(cls, train, val=(), test=()) -> "NodeSplit":
        as_arr = lambda xs: np.sort(np.asarray(list(xs), dtype=np.int64))
        return cls(as_arr(train), as_arr(val), as_arr(test))

    @property
    def unlabeled(self) -> np.ndarray:
        return np.sort(np.concatenate([self.val, self.test]))

    def to_dict(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}


def flip_edge(g: Graph, u: int, v: int) -> Graph:
    """Toggle membership of the unordered pair ``(u, v)``."""
    n = g.num_nodes
    if u == v:
        raise InvalidFlipError(f"cannot flip self-loop ({u}, {v})")
    if not (0 <= u < n and 0 <= v < n):
        raise InvalidFlipError(f"pair ({u}, {v}) outside 0..{n - 1}")
    a, b = min(u, v), max(u, v)
    if g.has_edge(a, b):
        keep = ~((g.edges[:, 0] == a) & (g.edges[:, 1] == b))
        edges = g.edges[keep]
    else:
        edges = np.vstack([g.edges, [[a, b]]])
    return g.with_edges(edges)


def degree_vector(g: Graph) -> np.ndarray:
    return np.bincount(g.edges.ravel(), minlength=g.num_nodes).astype(np.int64)


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` where ``D`` is the degree matrix of ``A + I``."""
    return normalize_adjacency(g.adjacency)


def normalize_adjacency(adj) -> sp.csr_matrix:
    n = adj.shape[0]
    a_tilde = sp.csr_matrix(adj, dtype=np.float64) + sp.identity(n, format="csr")
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    d = sp.diags(dinv)
    out = (d @ a_tilde @ d).tocsr()
    out.sort_indices()
    return out


def _allocate(counts, total):
    """Split ``total`` across classes proportionally to ``counts`` (largest remainder)."""
    counts = np.asarray(counts, dtype=np.float64)
    quota = counts * total / counts.sum()
    alloc = np.floor(quota).astype(np.int64)
    rest = int(total - alloc.sum())
    order = np.lexsort((np.arange(len(counts)), -(quota - alloc)))
    alloc[order[:rest]] += 1
    return alloc


def split_nodes(g: Graph, train_frac: float = 0.1, val_frac: float = 0.1, seed: int = 0) -> NodeSplit:
    """Stratified train/val/test split with ``floor(frac * N)`` nodes per set.

    Per-class sizes are proportional to class frequency (largest-remainder
    rounding); the remainder of the nodes goes to the test set.
    """
    if not (train_frac > 0 and val_frac >= 0 and train_frac + val_frac < 1):
        raise SplitError(f"invalid fractions train={train_frac}, val={val_frac}")
    n = g.num_nodes
    n_train = int(np.floor(train_frac * n + 1e-9))
    n_val = int(np.floor(val_frac * n + 1e-9))
    rng = np.random.default_rng(seed)
    classes = np.arange(g.num_classes)
    members = [rng.permutation(np.flatnonzero(g.labels == c)) for c in classes]
    counts = np.array([len(m) for m in members])
    train_alloc = _allocate(counts, n_train)
    empty = [int(c) for c in classes if counts[c] > 0 and train_alloc[c] == 0]
    if n_train == 0 or empty:
        raise SplitError(f"classes {empty or list(classes)} receive no training nodes "
                         f"(train size {n_train} for {int((counts > 0).sum())} classes)")
    val_alloc = np.minimum(_allocate(counts, n_val), counts - train_alloc)
    # capping can only happen for tiny classes; hand the deficit to classes with room
    deficit = n_val - int(val_alloc.sum())
    room = counts - train_alloc - val_alloc
    for c in np.argsort(-room, kind="stable"):
        if deficit <= 0:
            break
        take = min(deficit, int(room[c]))
        val_alloc[c] += take
        deficit -= take
    train, val, test = [], [], []
    for c, m in enumerate(members):
        t, v = train_alloc[c], val_alloc[c]
        train.append(m[:t])
        val.append(m[t:t + v])
        test.append(m[t + v:])
    cat = lambda parts: np.sort(np.concatenate(parts)).astype(np.int64)
    return NodeSplit(cat(train), cat(val), cat(test))


# ---------------------------------------------------------------------------
# file I/O

def _open_text(path):
    import gzip
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path, "r")


def read_edge_list(path) -> np.ndarray:
    """Parse a whitespace-separated ``u v`` edge list (``#`` starts a comment)."""
    pairs = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 2 fields, got {len(parts)}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer node id in {line!r}") from None
            if u < 0 or v < 0:
                raise ParseError(path, lineno, "negative node id")
            pairs.append((u, v))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def read_features(path) -> np.ndarray:
    try:
        feats = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ParseError(path, "?", str(exc)) from None
    return feats


def read_labels(path) -> np.ndarray:
    rows = {}
    with _open_text(path) as fh:
        header = fh.readline().strip().replace(" ", "")
        if header != "node,label":
            raise ParseError(path, 1, f"expected header 'node,label', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 2 fields, got {len(parts)}")
            try:
                node, label = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer value in {line!r}") from None
            if node in rows:
                raise ParseError(path, lineno, f"duplicate node {node}")
            rows[node] = label
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValidationError(f"{path}: label rows must cover nodes 0..{n - 1} exactly")
    return np.array([rows[i] for i in range(n)], dtype=np.int64)


def load_graph(edge_path, feature_path, label_path, num_classes=None) -> Graph:
    """Read a graph from an edge list, a feature CSV and a ``node,label`` CSV.

    Directed inputs are symmetrised, duplicates collapsed and self-loops
    dropped (a :class:`SelfLoopWarning` carries the count).
    """
    features = read_features(feature_path)
    labels = read_labels(label_path)
    n = features.shape[0]
    if labels.shape[0] != n:
        raise ValidationError(f"{feature_path} has {n} rows but {label_path} has {labels.shape[0]} labels")
    if labels.size and labels.min() < 0:
        raise ValidationError("negative label")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ValidationError(f"label {labels.max()} out of range for {num_classes} classes")
    edges = read_edge_list(edge_path)
    if edges.size and edges.max() >= n:
        raise ValidationError(f"edge list references node {edges.max()} but graph has {n} nodes")
    edges, loops = _canonical_edges(edges, n)
    if loops:
        logger.warning("%s: dropped %d self-loop(s)", edge_path, loops)
        warnings.warn(SelfLoopWarning(loops), stacklevel=2)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    return Graph(n, edges, np.ascontiguousarray(features), labels, int(num_classes))


def _fmt_features(features):
    if np.all(features == np.round(features)):
        return "%d"
    return "%.17g"


def save_graph(g: Graph, directory, compress_features: bool = False) -> dict:
    """Write ``edges.txt``, ``features.csv[.gz]`` and ``labels.csv`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    edge_path = d / EDGE_FILE
    feat_path = d / (FEATURE_FILE + (".gz" if compress_features else ""))
    label_path = d / LABEL_FILE
    with open(edge_path, "w") as fh:
        fh.write(f"# {g.num_nodes} nodes, {g.num_edges} undirected edges\n")
        for u, v in g.edges.tolist():
            fh.write(f"{u} {v}\n")
    np.savetxt(feat_path, g.features, delimiter=",", fmt=_fmt_features(g.features))
    with open(label_path, "w") as fh:
        fh.write("node,label\n")
        for i, lab in enumerate(g.labels.tolist()):
            fh.write(f"{i},{lab}\n")
    return {"edges": str(edge_path), "features": str(feat_path), "labels": str(label_path)}


def graph_files(directory) -> tuple:
    """Locate the three graph files in ``directory`` (features may be gzipped)."""
    d = Path(directory)
    feat = d / FEATURE_FILE
    if not feat.exists() and (d / (FEATURE_FILE + ".gz")).exists():
        feat = d / (FEATURE_FILE + ".gz")
    return d / EDGE_FILE, feat, d / LABEL_FILE


def load_graph_dir(directory) -> Graph:
    return load_graph(*graph_files(directory))


def resolve_dataset(name_or_path) -> Path:
    """Resolve a dataset directory, falling back to ``$GRAPHRE_DATA_DIR/<name>``."""
    p = Path(name_or_path)
    if p.is_dir():
        return p
    root = os.environ.get("GRAPHRE_DATA_DIR")
    if root and (Path(root) / str(name_or_path)).is_dir():
        return Path(root) / str(name_or_path)
    raise FileNotFoundError(f"dataset {name_or_path!r} not found (set GRAPHRE_DATA_DIR)")


def induced_subgraph(g: Graph, nodes: Iterable[int]) -> Graph:
    nodes = np.sort(np.asarray(list(nodes), dtype=np.int64))
    remap = -np.ones(g.num_nodes, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    keep = (remap[g.edges[:, 0]] >= 0) & (remap[g.edges[:, 1]] >= 0)
    edges = remap[g.edges[keep]]
    labels = g.labels[nodes]
    # compact class ids so that every class present keeps its relative order
    present = np.unique(labels)
    relabel = {int(c): i for i, c in enumerate(present)}
    labels = np.array([relabel[int(c)] for c in labels], dtype=np.int64)
    return Graph.build(len(nodes), edges, g.features[nodes], labels, len(present))


def largest_connected_component(g: Graph) -> Graph:
    _, comp = csgraph.connected_components(g.adjacency, directed=False)
    sizes = np.bincount(comp)
    keep = np.flatnonzero(comp == np.argmax(sizes))
    return induced_subgraph(g, keep)
