"""Node and edge structural measures and the clean-versus-perturbed edge profile.

Shortest-path measures share one dependency-accumulation sweep that runs
breadth-first search from a block of sources at once, so each level is a
sparse-times-dense product instead of a Python loop over nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .errors import ProfileError, ValidationError
from .graph import Graph, degree_vector

NODE_MEASURES = ("D", "C", "DC", "BC", "CC", "EC", "KC", "ND")
EDGE_MEASURES = ("EBC", "ELC")
MEASURES = NODE_MEASURES + EDGE_MEASURES

KATZ_ATTENUATION = 0.005
_BLOCK = 256


@dataclass
class PathStats:
    """Raw per-source sums from the shortest-path sweep (ordered source/target pairs)."""

    node_dependency: np.ndarray  # sum_s delta_s(v)
    edge_dependency: np.ndarray  # sum_s of fractional path share through each edge
    edge_load: np.ndarray  # sum_s of full path counts through each edge


def shortest_path_stats(g: Graph, block: int = _BLOCK) -> PathStats:
    n = g.num_nodes
    adj = g.adjacency
    eu, ev = g.edges[:, 0], g.edges[:, 1]
    bc = np.zeros(n)
    ebc = np.zeros(g.num_edges)
    elc = np.zeros(g.num_edges)
    for start in range(0, n, block):
        sources = np.arange(start, min(start + block, n))
        cols = np.arange(len(sources))
        dist = np.full((n, len(sources)), -1, dtype=np.int64)
        sigma = np.zeros((n, len(sources)))
        dist[sources, cols] = 0
        sigma[sources, cols] = 1.0
        frontier = sigma.copy()
        depth = 0
        while True:
            reach = adj @ frontier
            new = (dist < 0) & (reach > 0)
            if not new.any():
                break
            depth += 1
            dist[new] = depth
            sigma[new] = reach[new]
            frontier = np.where(new, sigma, 0.0)
        delta = np.zeros_like(sigma)
        paths_below = (dist >= 0).astype(np.float64)  # 1 + sum over DAG children, filled bottom-up
        for d in range(depth, 0, -1):
            at_d = dist == d
            parent = dist == d - 1
            ratio = np.where(at_d, (1.0 + delta) / np.where(at_d, sigma, 1.0), 0.0)
            delta += np.where(parent, sigma * (adj @ ratio), 0.0)
            paths_below += np.where(parent, adj @ np.where(at_d, paths_below, 0.0), 0.0)
        delta[sources, cols] = 0.0
        bc += delta.sum(axis=1)
        du, dv = dist[eu], dist[ev]
        su, sv = sigma[eu], sigma[ev]
        down = dv == du + 1  # u is the parent
        up = du == dv + 1  # v is the parent
        with np.errstate(divide="ignore", invalid="ignore"):
            ebc += np.where(down, su * (1.0 + delta[ev]) / sv, 0.0).sum(axis=1)
            ebc += np.where(up, sv * (1.0 + delta[eu]) / su, 0.0).sum(axis=1)
        elc += np.where(down, su * paths_below[ev], 0.0).sum(axis=1)
        elc += np.where(up, sv * paths_below[eu], 0.0).sum(axis=1)
    return PathStats(bc, ebc, elc)


def _clustering(g: Graph) -> np.ndarray:
    adj = g.adjacency
    deg = degree_vector(g).astype(np.float64)
    tri = np.asarray((adj @ adj).multiply(adj).sum(axis=1)).ravel() / 2.0
    denom = deg * (deg - 1)
    return np.divide(2.0 * tri, denom, out=np.zeros_like(deg), where=deg >= 2)


def _closeness(g: Graph) -> np.ndarray:
    n = g.num_nodes
    if n == 0:
        return np.zeros(0)
    dist = csgraph.shortest_path(g.adjacency, method="D", unweighted=True, directed=False)
    finite = np.isfinite(dist)
    reach = finite.sum(axis=1) - 1
    total = np.where(finite, dist, 0.0).sum(axis=1)
    return np.divide(reach, total, out=np.zeros(n), where=total > 0)


def _fix_sign(x):
    nz = np.flatnonzero(np.abs(x) > 1e-15)
    return -x if nz.size and x[nz[0]] < 0 else x


def principal_eigenpair(g: Graph, tol: float = 1e-10, max_iter: int = 1000):
    """Dominant eigenvector of ``A`` by power iteration on ``A + I`` (avoids bipartite oscillation)."""
    n = g.num_nodes
    shifted = (g.adjacency + sp.identity(n, format="csr")).tocsr()
    x = np.full(n, 1.0 / np.sqrt(n))
    lam = 1.0
    for _ in range(max_iter):
        y = shifted @ x
        lam = float(np.linalg.norm(y))
        y /= lam
        if np.abs(y - x).max() < tol:
            x = y
            break
        x = y
    return lam - 1.0, _fix_sign(x)


def _katz(g: Graph, attenuation: float) -> np.ndarray:
    n = g.num_nodes
    lam_max, _ = principal_eigenpair(g)
    if lam_max > 0 and attenuation >= 1.0 / lam_max:
        raise ValidationError(f"Katz attenuation {attenuation} diverges (spectral radius {lam_max:.3f})")
    system = (sp.identity(n, format="csc") - attenuation * g.adjacency.T).tocsc()
    x = np.atleast_1d(spsolve(system, np.ones(n)))
    return x / np.linalg.norm(x)


def _neighbor_degree(g: Graph) -> np.ndarray:
    deg = degree_vector(g).astype(np.float64)
    total = g.adjacency @ deg
    return np.divide(total, deg, out=np.zeros_like(deg), where=deg > 0)


def node_measures(g: Graph, measure: str, stats: PathStats | None = None) -> np.ndarray:
    """One of D, C, DC, BC, CC, EC, KC, ND for every node."""
    n = g.num_nodes
    if measure == "D":
        return degree_vector(g).astype(np.float64)
    if measure == "C":
        return _clustering(g)
    if measure == "DC":
        return degree_vector(g) / max(n - 1, 1)
    if measure == "BC":
        stats = stats or shortest_path_stats(g)
        scale = (n - 1) * (n - 2) / 2.0
        return stats.node_dependency / 2.0 / scale if scale > 0 else np.zeros(n)
    if measure == "CC":
        return _closeness(g)
    if measure == "EC":
        return principal_eigenpair(g)[1]
    if measure == "KC":
        return _katz(g, KATZ_ATTENUATION)
    if measure == "ND":
        return _neighbor_degree(g)
    raise ValidationError(f"unknown node measure {measure!r}; expected one of {NODE_MEASURES}")


def edge_measures(g: Graph, measure: str, stats: PathStats | None = None) -> dict:
    """EBC (normalised by ``N(N-1)/2``) or ELC (raw path counts) keyed by ``(u, v)``, ``u < v``."""
    if measure not in EDGE_MEASURES:
        raise ValidationError(f"unknown edge measure {measure!r}; expected one of {EDGE_MEASURES}")
    stats = stats or shortest_path_stats(g)
    n = g.num_nodes
    if measure == "EBC":
        pairs = n * (n - 1) / 2.0
        values = stats.edge_dependency / 2.0 / pairs if pairs > 0 else stats.edge_dependency * 0
    else:
        values = stats.edge_load / 2.0
    return {(int(u), int(v)): float(x) for (u, v), x in zip(g.edges.tolist(), values)}


def all_node_measures(g: Graph, stats: PathStats | None = None) -> dict:
    stats = stats or shortest_path_stats(g)
    return {m: node_measures(g, m, stats) for m in NODE_MEASURES}


# ---------------------------------------------------------------------------
# profile

@dataclass(frozen=True)
class EdgeProfile:
    clean_mean: dict
    perturbed_mean: dict
    counts: dict = field(default_factory=dict)
    empty: tuple = ()  # (measure, population) pairs whose population was empty

    def direction(self, measure) -> int:
        """Sign of perturbed minus clean mean (0 when undefined)."""
        diff = self.perturbed_mean[measure] - self.clean_mean[measure]
        return 0 if not np.isfinite(diff) else int(np.sign(diff))

    def to_rows(self):
        rows = [["measure", "clean", "perturbed", "n_clean", "n_perturbed"]]
        for m in MEASURES:
            rows.append([m, repr(self.clean_mean[m]), repr(self.perturbed_mean[m]),
                         self.counts[m][0], self.counts[m][1]])
        return rows

    def to_dict(self):
        return {"clean_mean": self.clean_mean, "perturbed_mean": self.perturbed_mean,
                "counts": {k: list(v) for k, v in self.counts.items()},
                "empty": [list(e) for e in self.empty]}


def _mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


def edge_profile(g_clean: Graph, p) -> EdgeProfile:
    """Mean of each measure over perturbed and untouched populations.

    Measures are taken on the perturbed graph. Node measures compare flip
    endpoints with all other nodes. Edge measures compare flipped pairs with
    the remaining edges; an inserted edge is measured in the perturbed graph,
    a deleted one in the clean graph where it still exists.
    """
    from .attacks import REMOVE, apply_perturbation

    if not len(p.flips):
        raise ProfileError("edge profile needs a nonempty perturbation")
    g_pert = apply_perturbation(g_clean, p)
    stats = shortest_path_stats(g_pert)
    nodes = all_node_measures(g_pert, stats)
    touched = np.zeros(g_pert.num_nodes, dtype=bool)
    touched[p.touched_nodes] = True
    clean, pert, counts, empty = {}, {}, {}, []
    for m in NODE_MEASURES:
        clean[m], pert[m] = _mean(nodes[m][~touched]), _mean(nodes[m][touched])
        counts[m] = (int((~touched).sum()), int(touched.sum()))
    removed = [f.pair for f in p.flips if f.direction == REMOVE]
    flipped = {f.pair for f in p.flips}
    edge_pert = {m: edge_measures(g_pert, m, stats) for m in EDGE_MEASURES}
    edge_clean = {m: edge_measures(g_clean, m) for m in EDGE_MEASURES} if removed else {}
    for m in EDGE_MEASURES:
        values = edge_pert[m]
        perturbed = [values[f.pair] for f in p.flips if f.direction != REMOVE]
        perturbed += [edge_clean[m][e] for e in removed]
        untouched = [x for e, x in values.items() if e not in flipped]
        clean[m], pert[m] = _mean(untouched), _mean(perturbed)
        counts[m] = (len(untouched), len(perturbed))
    for m in MEASURES:
        for pop, idx in (("clean", 0), ("perturbed", 1)):
            if counts[m][idx] == 0:
                empty.append((m, pop))
    return EdgeProfile(clean, pert, counts, tuple(empty))
