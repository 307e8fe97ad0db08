"""Global poisoning by meta-gradients through an unrolled training run.

The adjacency is relaxed to real values. An inner model is trained for a fixed
number of momentum steps from a fixed initialisation, the attacker objective
is evaluated on the result, and the whole trajectory is differentiated with
respect to the adjacency. One edge is flipped per outer step.

The attacker objective is *maximised*: cross-entropy on unlabeled nodes
against self-training pseudo-labels, or on the training nodes when
self-training is off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .. import autodiff as ad
from ..errors import CapacityError
from ..graph import Graph, NodeSplit, split_nodes
from ..models import GraphOps, ModelSpec, forward, init_weights
from .perturbation import ADD, REMOVE, Flip, Perturbation, apply_perturbation, budget_for

logger = logging.getLogger(__name__)

INNER_MODEL = ModelSpec("gcn", num_layers=2, hidden_dim=16, dropout=0.0)


@dataclass(frozen=True)
class MetaConfig:
    inner_epochs: int = 100
    inner_lr: float = 0.1
    momentum: float = 0.9
    self_training: bool = True
    model: ModelSpec = field(default=INNER_MODEL)
    dense_limit: int = 5000

    @classmethod
    def from_dict(cls, d) -> "MetaConfig":
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelSpec.from_dict({"dropout": 0.0, **d["model"]})
        return cls(**d)


def propagator(adj, architecture="gcn"):
    """Return ``(P, dinv)``: the propagation matrix of a (relaxed) adjacency.

    ``P = D^-1/2 (A + I) D^-1/2`` with ``dinv = D^-1/2``, or ``A + I`` with
    ``dinv = None`` for sum aggregation.
    """
    m = (sp.csr_matrix(adj, dtype=np.float64) + sp.identity(adj.shape[0], format="csr")).tocsr()
    if architecture == "gin":
        return m, None
    dinv = 1.0 / np.sqrt(np.asarray(m.sum(axis=1)).ravel())
    d = sp.diags(dinv)
    return (d @ m @ d).tocsr(), dinv


def _ops(features, prop, architecture):
    if architecture == "gin":
        return GraphOps(features, gin=prop)
    return GraphOps(features, prop=prop)


def inner_train(spec, ops, labels, train_nodes, cfg: MetaConfig, init, create_graph=False):
    """Unrolled momentum descent; returns the final weight tensors."""
    weights = [ad.Tensor(w, requires_grad=True) for w in init]
    velocity = [ad.Tensor(np.zeros_like(w)) for w in init]
    for _ in range(cfg.inner_epochs):
        logits, _ = forward(spec, weights, ops)
        loss = ad.cross_entropy(logits, labels, train_nodes)
        grads = ad.grad(loss, weights, create_graph=create_graph, stop_at_inputs=True)
        with ad.grad_mode(create_graph):
            velocity = [ad.add(ad.scale(v, cfg.momentum), g) for v, g in zip(velocity, grads)]
            stepped = [ad.add(w, ad.scale(v, -cfg.inner_lr)) for w, v in zip(weights, velocity)]
        if create_graph:
            weights = stepped
        else:
            weights = [ad.Tensor(w.value, requires_grad=True) for w in stepped]
    return weights


@dataclass
class _Problem:
    features: ad.SparseOperator
    labels: np.ndarray
    train: np.ndarray
    target_labels: np.ndarray
    target_nodes: np.ndarray
    init: list
    cfg: MetaConfig


def _objective(problem, prop_op, create_graph):
    spec = problem.cfg.model
    ops = _ops(problem.features, prop_op, spec.architecture)
    weights = inner_train(spec, ops, problem.labels, problem.train, problem.cfg, problem.init, create_graph)
    logits, _ = forward(spec, weights, ops)
    return ad.cross_entropy(logits, problem.target_labels, problem.target_nodes), logits


def attack_loss(problem: _Problem, adj) -> float:
    """Attacker objective as a plain function of a (relaxed, dense or sparse) adjacency."""
    p, _ = propagator(adj, problem.cfg.model.architecture)
    loss, _ = _objective(problem, ad.SparseOperator(p), create_graph=False)
    return loss.item()


def meta_gradient(problem: _Problem, adj):
    """Gradient of the attacker objective with respect to every adjacency entry.

    Entries are treated as independent (no symmetry tying); the returned
    ``N x N`` array is what central differences on single entries measure.
    """
    arch = problem.cfg.model.architecture
    p, dinv = propagator(adj, arch)
    prop = ad.SparseOperator(p, requires_grad=True)
    loss, _ = _objective(problem, prop, create_graph=True)
    (g_prop,) = ad.grad(loss, [prop])
    d_prop = g_prop.dense()
    if dinv is None:
        return d_prop, loss.item()
    # back through P = dinv_i * M_ij * dinv_j, with d_i = sum_j M_ij
    weighted = p.multiply(d_prop)
    through_deg = np.asarray(weighted.sum(axis=1)).ravel() + np.asarray(weighted.sum(axis=0)).ravel()
    d_deg = -0.5 * through_deg * dinv ** 2
    d_prop *= dinv[:, None]
    d_prop *= dinv[None, :]
    d_prop += d_deg[:, None]
    return d_prop, loss.item()


def symmetric_scores(problem: _Problem, adj):
    """``dA + dA.T`` for a symmetric adjacency, plus the attacker loss."""
    grad_adj, loss = meta_gradient(problem, adj)
    grad_adj += grad_adj.T.copy()
    return grad_adj, loss


def build_problem(g: Graph, split: NodeSplit, cfg: MetaConfig, seed: int) -> _Problem:
    features = ad.SparseOperator(sp.csr_matrix(g.features))
    init = init_weights(cfg.model, g.num_features, g.num_classes, seed)
    problem = _Problem(features, g.labels, split.train, g.labels, split.train, init, cfg)
    if cfg.self_training:
        p, _ = propagator(g.adjacency, cfg.model.architecture)
        _, logits = _objective(problem, ad.SparseOperator(p), create_graph=False)
        pseudo = np.argmax(logits.value, axis=1)
        pseudo[split.train] = g.labels[split.train]
        problem.target_labels = pseudo
        problem.target_nodes = split.unlabeled
    return problem


def mettack(g: Graph, split: NodeSplit, rate: float, meta: MetaConfig | dict | None = None,
            seed: int = 0, budget: int | None = None) -> Perturbation:
    """Greedy meta-gradient poisoning with ``ceil(rate * K)`` flips.

    Every step depends only on the current graph, so a run with a larger budget
    extends (never changes) the flip sequence of a smaller one.
    """
    cfg = meta if isinstance(meta, MetaConfig) else MetaConfig.from_dict(meta or {})
    n = g.num_nodes
    if n > cfg.dense_limit:
        raise CapacityError(f"graph has {n} nodes; the dense meta-gradient limit is {cfg.dense_limit}")
    budget = budget_for(rate, g.num_edges) if budget is None else int(budget)
    if budget == 0:
        return Perturbation((), 0, "mettack", seed)
    problem = build_problem(g, split, cfg, seed)
    adj = g.adjacency.toarray()
    blocked = np.tril(np.ones((n, n), dtype=bool))  # diagonal, lower triangle and used pairs
    flips, losses, stop = [], [], None
    for step in range(budget):
        score, loss = symmetric_scores(problem, sp.csr_matrix(adj))
        losses.append(loss)
        score *= 1.0 - 2.0 * adj
        score[blocked] = -np.inf
        idx = int(np.argmax(score))
        best = score.flat[idx]
        if not best > 0:
            stop = "no flip increases the attacker objective"
            break
        u, v = divmod(idx, n)
        direction = REMOVE if adj[u, v] else ADD
        adj[u, v] = adj[v, u] = 1.0 - adj[u, v]
        blocked[u, v] = True
        flips.append(Flip(u, v, direction, float(best)))
        logger.debug("mettack step %d: %s (%d, %d) score=%.3g loss=%.5f", step, direction, u, v, best, loss)
    return Perturbation(tuple(flips), budget, "mettack", seed, stop_reason=stop, meta={"attack_loss": losses})


def adversarial_perturbation(g: Graph, proportion: float, seed: int = 0, split: NodeSplit | None = None,
                             meta: MetaConfig | dict | None = None) -> Perturbation:
    """Meta-gradient flips for adversarial training.

    The attack uses only the training nodes for its objective (no self-training).
    """
    if not 0 <= proportion <= 0.5:
        raise ValueError(f"proportion must lie in [0, 0.5], got {proportion}")
    split = split or split_nodes(g, seed=seed)
    cfg = meta if isinstance(meta, MetaConfig) else MetaConfig.from_dict(meta or {})
    cfg = MetaConfig(cfg.inner_epochs, cfg.inner_lr, cfg.momentum, False, cfg.model, cfg.dense_limit)
    return mettack(g, split, proportion, cfg, seed)


def adversarial_augment(g: Graph, proportion: float, seed: int = 0, split: NodeSplit | None = None,
                        meta: MetaConfig | dict | None = None) -> Graph:
    """Training graph extended with :func:`adversarial_perturbation` flips (labels unchanged)."""
    if proportion == 0:
        return g
    return apply_perturbation(g, adversarial_perturbation(g, proportion, seed, split, meta))
