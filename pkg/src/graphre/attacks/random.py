"""Uniform random edge insertions and deletions."""

from __future__ import annotations

import numpy as np

from ..errors import AttackError
from ..graph import Graph
from .perturbation import ADD, REMOVE, Flip, Perturbation, budget_for


def _sample_non_edge(rng, n, edges, used, max_tries=200):
    for _ in range(max_tries):
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        pair = (int(min(u, v)), int(max(u, v)))
        if pair not in edges and pair not in used:
            return pair
    # dense graph: fall back to enumerating what is left
    free = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in edges and (a, b) not in used]
    return free[rng.integers(len(free))] if free else None


def random_attack(g: Graph, rate: float, seed: int = 0) -> Perturbation:
    """Flip ``ceil(rate * K)`` pairs; each flip is an insertion or a deletion with probability 1/2."""
    budget = budget_for(rate, g.num_edges)
    if budget == 0:
        return Perturbation((), 0, "random", seed)
    n = g.num_nodes
    if g.num_edges == 0 and n < 2:
        raise AttackError("graph has neither edges nor candidate non-edges")
    rng = np.random.default_rng(seed)
    edges = set(g.edge_set)
    removable = [tuple(e) for e in g.edges.tolist()]  # edges not yet flipped; swap-pop on use
    used, flips = set(), []
    stop = None
    while len(flips) < budget:
        want_add = rng.random() < 0.5
        choice = None
        for add in (want_add, not want_add):
            if add:
                pair = _sample_non_edge(rng, n, edges, used)
                if pair is not None:
                    choice = (pair, ADD)
            elif removable:
                i = int(rng.integers(len(removable)))
                removable[i], removable[-1] = removable[-1], removable[i]
                choice = (removable.pop(), REMOVE)
            if choice is not None:
                break
        if choice is None:
            stop = "no feasible flips left"
            break
        (u, v), direction = choice
        used.add((u, v))
        flips.append(Flip(u, v, direction))
    return Perturbation(tuple(flips), budget, "random", seed, stop_reason=stop)
