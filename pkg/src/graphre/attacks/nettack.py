"""Targeted structure attack against a linearised two-layer GCN surrogate.

The surrogate scores a node as ``logits = Â² X W``. For a target ``t`` only the
row ``Z[t]`` matters, and it depends on the graph through the two-hop
neighbourhood of ``t``::

    Z[t] = d_t^{-1/2} * sum_{j in N[t]} d_j^{-1} * sum_{k in N[j]} d_k^{-1/2} M[k]

with ``M = X W``, closed neighbourhoods ``N[.]`` and degrees ``d`` counted
with the self-loop. Each candidate flip is scored by re-evaluating this sum
on the toggled neighbourhoods, which is exact and cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..graph import Graph, NodeSplit, flip_edge, normalized_adjacency
from ..models import ModelSpec, TrainHyper, train
from .perturbation import ADD, REMOVE, Flip, Perturbation, apply_perturbation

SURROGATE_HYPER = TrainHyper(lr=0.1, weight_decay=5e-4, momentum=0.9, epochs=200, seed=0)
TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    weight: np.ndarray  # D x C
    train_meta: dict

    def logits(self, g: Graph) -> np.ndarray:
        a = normalized_adjacency(g)
        return a @ (a @ (g.features @ self.weight))


def surrogate_fit(g: Graph, split: NodeSplit, hyper: TrainHyper | None = None) -> SurrogateModel:
    """Fit ``softmax(Â² X W)`` by cross-entropy on the training nodes."""
    spec = ModelSpec("sgc", num_layers=1, dropout=0.0, sgc_hops=2)
    model = train(spec, g, split, hyper or SURROGATE_HYPER)
    return SurrogateModel(np.array(model.weights[0]), dict(model.train_meta))


def margin_loss(z_row: np.ndarray, label: int) -> float:
    """Best wrong-class score minus true-class score."""
    others = np.delete(z_row, label)
    return float(others.max() - z_row[label])


class _LocalView:
    """Neighbour sets of the current graph with at most one pair toggled."""

    def __init__(self, nbrs):
        self.nbrs = nbrs
        self.toggled = None

    def __call__(self, i):
        base = self.nbrs[i]
        if self.toggled is None or i not in self.toggled:
            return base
        u, v = self.toggled
        other = v if i == u else u
        return base - {other} if other in base else base | {other}


def _target_row(view, target, m):
    def deg(i):
        return len(view(i)) + 1

    total = np.zeros(m.shape[1])
    for j in (target, *view(target)):
        inner = m[j] / np.sqrt(deg(j))
        for k in view(j):
            inner = inner + m[k] / np.sqrt(deg(k))
        total += inner / deg(j)
    return total / np.sqrt(deg(target))


def candidate_pairs(g_nbrs, n, target, mode="default"):
    """Pairs considered at one greedy step.

    ``default``: every ``(target, v)`` plus every pair among the target's current
    neighbours. ``all``: every unordered pair of the graph.
    """
    if mode == "all":
        return [(u, v) for u in range(n) for v in range(u + 1, n)]
    if mode != "default":
        raise ValidationError(f"unknown candidate mode {mode!r}")
    pairs = {(min(target, v), max(target, v)) for v in range(n) if v != target}
    nb = sorted(g_nbrs[target])
    pairs.update((a, b) for i, a in enumerate(nb) for b in nb[i + 1:])
    return sorted(pairs)


def _select(scored):
    """Highest score; scores within a relative ``TIE_TOL`` tie and go to the smallest pair."""
    best = max(s for _, s in scored)
    tol = TIE_TOL * max(1.0, abs(best))
    return min(p for p, s in scored if s >= best - tol)


def nettack(g: Graph, s: SurrogateModel, target: int, budget: int, candidates: str = "default",
            label: int | None = None) -> Perturbation:
    """Greedy structure attack on ``target`` under the surrogate margin loss.

    ``label`` defaults to the target's ground-truth class.
    """
    n = g.num_nodes
    if not 0 <= target < n:
        raise ValidationError(f"target {target} outside 0..{n - 1}")
    if budget < 0:
        raise ValidationError("budget must be non-negative")
    label = int(g.labels[target]) if label is None else int(label)
    m = g.features @ s.weight
    nbrs = [set(x) for x in g.neighbors]
    view = _LocalView(nbrs)
    used, flips, stop = set(), [], None
    while len(flips) < budget:
        pool = [p for p in candidate_pairs(nbrs, n, target, candidates) if p not in used]
        if not pool:
            stop = "no candidate flips left"
            break
        scored = []
        for pair in pool:
            view.toggled = pair
            scored.append((pair, margin_loss(_target_row(view, target, m), label)))
        view.toggled = None
        u, v = _select(scored)
        score = dict(scored)[(u, v)]
        direction = REMOVE if v in nbrs[u] else ADD
        if direction == ADD:
            nbrs[u].add(v)
            nbrs[v].add(u)
        else:
            nbrs[u].discard(v)
            nbrs[v].discard(u)
        used.add((u, v))
        flips.append(Flip(u, v, direction, score))
    return Perturbation(tuple(flips), budget, "nettack", 0, (int(target),), stop)


def brute_force_scores(g: Graph, s: SurrogateModel, target: int, pairs, label: int | None = None) -> list:
    """Margin loss after each single flip, via a full dense recomputation (test oracle)."""
    label = int(g.labels[target]) if label is None else int(label)
    out = []
    for u, v in pairs:
        z = s.logits(flip_edge(g, u, v))
        out.append(((u, v), margin_loss(np.asarray(z[target]).ravel(), label)))
    return out


def brute_force_step(g: Graph, s: SurrogateModel, target: int, pairs, label: int | None = None):
    """Exhaustive argmax over ``pairs`` with the same tie rule as :func:`nettack`."""
    scored = brute_force_scores(g, s, target, pairs, label)
    choice = _select(scored)
    return choice, dict(scored)[choice]


def nettack_targets(g: Graph, s: SurrogateModel, targets, budget: int, candidates: str = "default",
                    seed: int = 0) -> Perturbation:
    """Attack several targets one after another on the evolving graph.

    Each target gets ``budget`` flips. A later flip that undoes an earlier one
    cancels it, so the result holds only the net change against ``g``.
    """
    targets = tuple(int(t) for t in targets)
    current = g
    net = {}
    for t in targets:
        p = nettack(current, s, t, budget, candidates)
        current = apply_perturbation(current, p)
        for f in p.flips:
            if f.pair in net:
                del net[f.pair]
            else:
                net[f.pair] = f
    return Perturbation(tuple(net.values()), budget * len(targets), "nettack", seed, targets)
