"""Signed edge-flip sequences and their application to graphs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import InconsistentPerturbationError, ValidationError
from ..graph import Graph

ADD, REMOVE = "add", "remove"


def budget_for(rate: float, num_edges: int) -> int:
    """``ceil(rate * K)``, robust to representation error (0.1 * 100 is not 10.000...1)."""
    if rate < 0:
        raise ValidationError(f"perturbation rate must be non-negative, got {rate}")
    return int(math.ceil(round(rate * num_edges, 9)))


@dataclass(frozen=True)
class Flip:
    u: int
    v: int
    direction: str
    score: float | None = None

    def __post_init__(self):
        if self.direction not in (ADD, REMOVE):
            raise ValidationError(f"flip direction must be 'add' or 'remove', got {self.direction!r}")
        if self.u > self.v:
            a, b = self.v, self.u
            object.__setattr__(self, "u", a)
            object.__setattr__(self, "v", b)

    @property
    def pair(self):
        return (self.u, self.v)

    def reversed(self) -> "Flip":
        return Flip(self.u, self.v, REMOVE if self.direction == ADD else ADD)

    def to_dict(self):
        d = {"u": int(self.u), "v": int(self.v), "direction": self.direction}
        if self.score is not None:
            d["score"] = float(self.score)
        return d


@dataclass(frozen=True)
class Perturbation:
    flips: tuple
    budget: int
    attack_name: str
    seed: int = 0
    target_nodes: tuple | None = None
    stop_reason: str | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "flips", tuple(self.flips))
        if len(self.flips) > self.budget:
            raise ValidationError(f"{len(self.flips)} flips exceed budget {self.budget}")
        pairs = [f.pair for f in self.flips]
        if len(set(pairs)) != len(pairs):
            raise ValidationError("perturbation flips the same pair twice")

    def __len__(self):
        return len(self.flips)

    @property
    def num_added(self) -> int:
        return sum(f.direction == ADD for f in self.flips)

    @property
    def num_removed(self) -> int:
        return sum(f.direction == REMOVE for f in self.flips)

    @property
    def touched_nodes(self) -> np.ndarray:
        return np.unique(np.array([f.pair for f in self.flips], dtype=np.int64).reshape(-1))

    def truncate(self, budget: int) -> "Perturbation":
        """The first ``budget`` flips, as if the attack had run with that budget.

        Valid for greedy attacks whose step depends only on the current graph
        state (Mettack with fixed initialisation, Nettack).
        """
        stop = self.stop_reason if len(self.flips) <= budget else None
        return replace(self, flips=self.flips[:budget], budget=budget, stop_reason=stop)

    def reversed(self) -> "Perturbation":
        return replace(self, flips=tuple(f.reversed() for f in reversed(self.flips)))

    def to_dict(self):
        d = {"attack": self.attack_name, "seed": self.seed, "budget": self.budget,
             "flips": [f.to_dict() for f in self.flips]}
        if self.target_nodes is not None:
            d["target_nodes"] = [int(t) for t in self.target_nodes]
        if self.stop_reason:
            d["stop_reason"] = self.stop_reason
        return d

    @classmethod
    def from_dict(cls, d) -> "Perturbation":
        flips = [Flip(int(f["u"]), int(f["v"]), f["direction"], f.get("score")) for f in d["flips"]]
        targets = d.get("target_nodes")
        return cls(tuple(flips), int(d["budget"]), d["attack"], int(d.get("seed", 0)),
                   tuple(targets) if targets is not None else None, d.get("stop_reason"))


def save_perturbation(p: Perturbation, path) -> None:
    with open(path, "w") as fh:
        json.dump(p.to_dict(), fh, indent=1)


def load_perturbation(path) -> Perturbation:
    with open(path) as fh:
        return Perturbation.from_dict(json.load(fh))


def apply_perturbation(g: Graph, p: Perturbation) -> Graph:
    """Apply the flips in order, checking each against the current edge set."""
    edges = set(g.edge_set)
    n = g.num_nodes
    for i, f in enumerate(p.flips):
        if f.u == f.v or not (0 <= f.u < n and 0 <= f.v < n):
            raise InconsistentPerturbationError(i, f"pair ({f.u}, {f.v}) is not a valid node pair")
        present = f.pair in edges
        if f.direction == ADD:
            if present:
                raise InconsistentPerturbationError(i, f"cannot add existing edge ({f.u}, {f.v})")
            edges.add(f.pair)
        else:
            if not present:
                raise InconsistentPerturbationError(i, f"cannot remove missing edge ({f.u}, {f.v})")
            edges.remove(f.pair)
    if not p.flips:
        return g
    return g.with_edges(np.array(sorted(edges), dtype=np.int64).reshape(-1, 2))
