"""Community graphs with a tunable mixing parameter, and link-prediction regularity.

The generator is a degree-corrected planted partition. Stub matching inside
each community first builds a graph with no inter-community links. Every edge
then carries a uniform key, and edges whose key falls below ``mu`` are cut;
their endpoints are re-paired across communities. Each incident edge of a
node is therefore inter-community with probability ``mu``, and for a fixed
seed the intra-community edge sets are nested as ``mu`` grows, which keeps
comparisons across ``mu`` low-variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import GenerationError, ValidationError
from .graph import Graph, degree_vector

FEATURE_NOISE = 0.05
_MATCH_ROUNDS = 20


@dataclass(frozen=True)
class SyntheticSpec:
    num_nodes: int = 500
    num_communities: int = 5
    mu: float = 0.1
    avg_degree: float = 10.0
    degree_exponent: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_nodes < 2:
            raise GenerationError("need at least two nodes")
        if not 0 <= self.mu <= 1:
            raise GenerationError(f"mu must lie in [0, 1], got {self.mu}")
        if self.mu > 0 and self.num_communities < 2:
            raise GenerationError("mu > 0 needs at least two communities")
        if self.num_communities < 1 or self.num_communities > self.num_nodes:
            raise GenerationError(f"cannot place {self.num_nodes} nodes in {self.num_communities} communities")
        if self.avg_degree < 1:
            raise GenerationError(f"expected degree must be >= 1, got {self.avg_degree}")
        if self.avg_degree >= self.num_nodes:
            raise GenerationError(f"avg_degree {self.avg_degree} is infeasible for {self.num_nodes} nodes")
        if self.degree_exponent != 0 and self.degree_exponent <= 2:
            raise GenerationError("a power-law degree exponent must exceed 2 for a finite mean")

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        return cls(**d)


def _stochastic_round(rng, x):
    x = np.asarray(x, dtype=np.float64)
    base = np.floor(x)
    return (base + (rng.random(x.shape) < x - base)).astype(np.int64)


def _degree_sequence(rng, spec: SyntheticSpec):
    n = spec.num_nodes
    if spec.degree_exponent == 0:
        target = np.full(n, float(spec.avg_degree))
    else:
        g = spec.degree_exponent
        k_min = spec.avg_degree * (g - 2) / (g - 1)
        # inverse-CDF sample of a continuous power law on [k_min, inf)
        target = k_min * (1.0 - rng.random(n)) ** (-1.0 / (g - 1))
        target = np.minimum(target, n - 1)
    return np.clip(_stochastic_round(rng, target), 1, n - 1)


def _match(rng, stubs, accept, existing):
    """Pair up stubs; rejected pairs are returned to the pool and reshuffled."""
    edges = []
    pool = np.asarray(stubs, dtype=np.int64)
    for _ in range(_MATCH_ROUNDS):
        if len(pool) < 2:
            break
        pool = rng.permutation(pool)
        if len(pool) % 2:
            pool = pool[:-1]
        leftover = []
        for a, b in pool.reshape(-1, 2).tolist():
            pair = (a, b) if a < b else (b, a)
            if a != b and pair not in existing and accept(a, b):
                existing.add(pair)
                edges.append(pair)
            else:
                leftover += [a, b]
        if len(leftover) == len(pool):
            break
        pool = np.asarray(leftover, dtype=np.int64)
    return edges


def generate(spec: SyntheticSpec):
    """Return ``(graph, communities)``; labels are the community ids."""
    spec.validate()
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5)]
    rng_layout, rng_intra, rng_cut, rng_inter, rng_feat = streams
    n, k = spec.num_nodes, spec.num_communities
    communities = rng_layout.permutation(np.arange(n) % k).astype(np.int64)
    degrees = _degree_sequence(rng_layout, spec)
    existing: set = set()
    intra = []
    for c in range(k):
        members = np.flatnonzero(communities == c)
        intra += _match(rng_intra, np.repeat(members, degrees[members]), lambda a, b: True, existing)
    intra = np.array(sorted(intra), dtype=np.int64).reshape(-1, 2)
    cut = rng_cut.random(len(intra)) < spec.mu
    kept = intra[~cut]
    existing = set(map(tuple, kept.tolist()))
    inter = _match(rng_inter, intra[cut].ravel(), lambda a, b: communities[a] != communities[b], existing)
    edges = np.vstack([kept, np.array(inter, dtype=np.int64).reshape(-1, 2)])
    onehot = np.eye(k)[communities]
    noise = rng_feat.random(onehot.shape) < FEATURE_NOISE
    features = np.logical_xor(onehot > 0, noise).astype(np.float64)
    return Graph.build(n, edges, features, communities, k), communities


def mixing_fraction(g: Graph, communities) -> float:
    """Mean over non-isolated nodes of the share of incident edges leaving the node's community."""
    communities = np.asarray(communities)
    if communities.shape != (g.num_nodes,):
        raise ValidationError("community assignment must cover every node")
    deg = degree_vector(g)
    u, v = g.edges[:, 0], g.edges[:, 1]
    cross = communities[u] != communities[v]
    inter = np.bincount(u[cross], minlength=g.num_nodes) + np.bincount(v[cross], minlength=g.num_nodes)
    has = deg > 0
    if not has.any():
        return 0.0
    return float(np.mean(inter[has] / deg[has]))


class LinkScores(NamedTuple):
    pairs: np.ndarray  # (M, 2), u < v
    scores: np.ndarray  # (M,)


def link_prediction_scores(g: Graph) -> LinkScores:
    """Resource-allocation score of every non-edge, highest first, ties by ``(u, v)``."""
    n = g.num_nodes
    adj = g.adjacency
    deg = degree_vector(g).astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    ra = (adj @ sp.diags(inv) @ adj).toarray()
    iu, iv = np.triu_indices(n, k=1)
    keep = ~np.asarray(adj[iu, iv]).ravel().astype(bool)
    iu, iv = iu[keep], iv[keep]
    scores = ra[iu, iv]
    order = np.lexsort((iv, iu, -scores))
    return LinkScores(np.column_stack([iu[order], iv[order]]), scores[order])


def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _pair_keys(edges, seed):
    """Deterministic pseudo-random key in ``[0, 1)`` for each ``(u, v)`` pair."""
    with np.errstate(over="ignore"):
        u = edges[:, 0].astype(np.uint64)
        v = edges[:, 1].astype(np.uint64)
        salt = _splitmix64(np.uint64(seed))
        h = _splitmix64(_splitmix64(u ^ salt) ^ v)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class RegularityResult:
    sigma_c: float
    removed_edges: np.ndarray
    predicted_top: np.ndarray
    removal_fraction: float
    seed: int


def structural_regularity(g: Graph, removal_fraction: float = 0.1, seed: int = 0) -> RegularityResult:
    """Share of randomly hidden edges that the link predictor ranks in its top ``|hidden|``."""
    if not 0 < removal_fraction < 1:
        raise ValidationError(f"removal_fraction must lie in (0, 1), got {removal_fraction}")
    if g.num_edges < 10:
        raise ValidationError(f"graph has {g.num_edges} edges; at least 10 are needed")
    n_remove = int(math.ceil(round(removal_fraction * g.num_edges, 9)))
    # i.i.d. uniform key per node pair: a uniform random subset that stays
    # stable across graphs sharing edges
    keys = _pair_keys(g.edges, seed)
    idx = np.sort(np.lexsort((np.arange(g.num_edges), keys))[:n_remove])
    removed = g.edges[idx]
    keep = np.ones(g.num_edges, dtype=bool)
    keep[idx] = False
    ranked = link_prediction_scores(g.with_edges(g.edges[keep]))
    top = ranked.pairs[:n_remove]
    hidden = set(map(tuple, removed.tolist()))
    hits = sum(tuple(p) in hidden for p in top.tolist())
    return RegularityResult(hits / n_remove, removed, top, removal_fraction, seed)
