"""Robustness measurements: logit margins, perturbation landscapes, transfer rates
and neuron sensitivity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedATRError, ValidationError
from .graph import Graph, NodeSplit
from .models import (ModelSpec, TrainedModel, TrainHyper, hidden_representations, logits_accuracy,
                     predict_logits, train)


@dataclass(frozen=True)
class MarginReport:
    per_node_margin: np.ndarray
    mean_margin: float
    fraction_negative: float
    node_set: np.ndarray

    def to_dict(self):
        return {"mean_margin": self.mean_margin, "fraction_negative": self.fraction_negative,
                "nodes": self.node_set.tolist(), "per_node_margin": self.per_node_margin.tolist()}


def logit_margins(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """True-class logit minus the largest other-class logit, row by row."""
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(len(labels))
    true = logits[rows, labels]
    others = logits.copy()
    others[rows, labels] = -np.inf
    return true - others.max(axis=1)


def margin_report(logits: np.ndarray, labels: np.ndarray, nodes) -> MarginReport:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValidationError("decision surface needs a nonempty node set")
    margins = logit_margins(logits[nodes], labels[nodes])
    return MarginReport(margins, float(np.mean(margins)), float(np.mean(margins < 0)), nodes)


def decision_surface(m: TrainedModel, g: Graph, nodes) -> MarginReport:
    return margin_report(predict_logits(m, g), g.labels, nodes)


# ---------------------------------------------------------------------------
# perturbation landscape

@dataclass(frozen=True)
class LandscapeGrid:
    alphas: tuple
    betas: tuple
    values: np.ndarray
    seeds_per_cell: int

    def to_rows(self):
        """CSV rows: header of betas, then one row per alpha."""
        rows = [["alpha\\beta", *[f"{b:g}" for b in self.betas]]]
        for a, vals in zip(self.alphas, self.values):
            rows.append([f"{a:g}", *[repr(float(v)) for v in vals]])
        return rows


def perturb_features(features: np.ndarray, alpha: float, rng) -> np.ndarray:
    """Flip binary entries with probability ``alpha``; add ``U(-alpha, alpha)`` noise to real ones."""
    if alpha == 0:
        return features
    binary = np.isin(features, (0.0, 1.0)).all()
    if binary:
        flips = rng.random(features.shape) < alpha
        return np.where(flips, 1.0 - features, features)
    return features + rng.uniform(-alpha, alpha, size=features.shape)


def robustness_landscape(m_spec: ModelSpec, g: Graph, split: NodeSplit, alphas, betas,
                         seeds_per_cell: int = 1, seed: int = 0,
                         hyper: TrainHyper | None = None) -> LandscapeGrid:
    """Mean test margin of a model retrained on feature- and edge-perturbed graphs."""
    from .attacks import apply_perturbation, random_attack

    alphas, betas = tuple(float(a) for a in alphas), tuple(float(b) for b in betas)
    if 0.0 not in alphas or 0.0 not in betas:
        raise ValidationError("alphas and betas must both include 0")
    hyper = hyper or TrainHyper()
    values = np.zeros((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            cell = []
            for r in range(seeds_per_cell):
                s = seed + r
                rng = np.random.default_rng([s, 7])
                pg = g
                if a:
                    pg = Graph(g.num_nodes, g.edges, perturb_features(g.features, a, rng), g.labels, g.num_classes)
                if b:
                    pg = apply_perturbation(pg, random_attack(pg, b, s))
                model = train(m_spec, pg, split, TrainHyper(hyper.lr, hyper.weight_decay, hyper.momentum,
                                                            hyper.epochs, s))
                cell.append(decision_surface(model, pg, split.test).mean_margin)
            values[i, j] = np.mean(cell)
    return LandscapeGrid(alphas, betas, values, seeds_per_cell)


# ---------------------------------------------------------------------------
# transferability

def atr(acc_transfer: float, acc_specific: float) -> float:
    """Relative accuracy change of a transferred attack against the target's own attack.

    Negative means the transferred perturbation hurts more.
    """
    if acc_specific == 0:
        raise UndefinedATRError("accuracy under the specific attack is zero")
    return (acc_transfer - acc_specific) / acc_specific


@dataclass(frozen=True)
class TransferMatrix:
    sources: tuple
    targets: tuple
    acc_transfer: np.ndarray
    acc_specific: np.ndarray
    atr: np.ndarray
    per_seed: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {"sources": list(self.sources), "targets": list(self.targets),
                "acc_transfer": self.acc_transfer.tolist(), "acc_specific": self.acc_specific.tolist(),
                "atr": self.atr.tolist()}


def attack_for(source: ModelSpec, g: Graph, split: NodeSplit, attack_config: dict, seed: int):
    """Perturbation crafted against ``source`` according to ``attack_config``."""
    from .attacks import MetaConfig, mettack, random_attack

    method = attack_config.get("method", "mettack")
    rate = float(attack_config.get("rate", 0.05))
    if method == "random":
        return random_attack(g, rate, seed)
    if method == "mettack":
        meta = dict(attack_config.get("meta", {}))
        inner = ModelSpec(source.architecture, source.num_layers, source.hidden_dim, 0.0,
                          source.sgc_hops, source.teleport, source.prop_steps)
        return mettack(g, split, rate, MetaConfig.from_dict({**meta, "model": inner}), seed)
    raise ValidationError(f"transfer attacks support 'mettack' and 'random', not {method!r}")


def transfer_matrix(model_specs, g: Graph, split: NodeSplit, attack_config: dict, seeds,
                    hyper: TrainHyper | None = None, attack_seed: int | None = None) -> TransferMatrix:
    """Accuracy of each target retrained on each source's perturbation.

    ``model_specs`` maps model ids to specs (a list is keyed by architecture).
    Each source's perturbation is crafted once, with ``attack_seed`` (default:
    the first seed); target training is repeated for every seed.
    """
    from .attacks import apply_perturbation

    if not isinstance(model_specs, dict):
        model_specs = {s.architecture: s for s in model_specs}
    if len(model_specs) < 2:
        raise ValidationError("transfer_matrix needs at least two models")
    seeds = list(seeds)
    if not seeds:
        raise ValidationError("seeds must be nonempty")
    hyper = hyper or TrainHyper()
    ids = tuple(model_specs)
    acc = np.zeros((len(ids), len(ids)))
    per_seed = {}
    for i, src in enumerate(ids):
        attack_seed = seeds[0] if attack_seed is None else attack_seed
        poisoned = apply_perturbation(g, attack_for(model_specs[src], g, split, attack_config, attack_seed))
        for j, tgt in enumerate(ids):
            runs = []
            for s in seeds:
                h = TrainHyper(hyper.lr, hyper.weight_decay, hyper.momentum, hyper.epochs, s)
                model = train(model_specs[tgt], poisoned, split, h)
                runs.append(logits_accuracy(predict_logits(model, poisoned), poisoned.labels, split.test))
            per_seed[(src, tgt)] = runs
            acc[i, j] = np.mean(runs)
    specific = np.diag(acc).copy()
    rates = np.array([[atr(acc[i, j], specific[j]) for j in range(len(ids))] for i in range(len(ids))])
    return TransferMatrix(ids, ids, acc, specific, rates, per_seed)


# ---------------------------------------------------------------------------
# neuron sensitivity

@dataclass(frozen=True)
class SensitivityReport:
    per_layer_sigma: tuple = ()
    weight_delta: tuple = ()
    pair_count: int = 0
    large_delta_fraction: tuple = ()
    tau: float | None = None

    def to_dict(self):
        return {"per_layer_sigma": list(self.per_layer_sigma), "pair_count": self.pair_count,
                "large_delta_fraction": list(self.large_delta_fraction), "tau": self.tau,
                "weight_delta_shapes": [list(w.shape) for w in self.weight_delta]}


def neuron_sensitivity(m: TrainedModel, pairs) -> SensitivityReport:
    """Per-layer mean of ``||H(clean) - H(perturbed)||_2 / size(H)`` over graph pairs.

    Every layer output counts, including the final logits.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("neuron_sensitivity needs at least one graph pair")
    totals = None
    for clean, perturbed in pairs:
        a, b = hidden_representations(m, clean), hidden_representations(m, perturbed)
        dists = []
        for ha, hb in zip(a, b):
            if ha.shape != hb.shape:
                raise ValidationError(f"layer shapes differ: {ha.shape} vs {hb.shape}")
            dists.append(np.linalg.norm((ha - hb).ravel()) / ha.size)
        totals = np.array(dists) if totals is None else totals + dists
    return SensitivityReport(tuple(float(x) for x in totals / len(pairs)), (), len(pairs))


def weight_delta(m_clean: TrainedModel, m_poisoned: TrainedModel, tau: float = 0.1) -> SensitivityReport:
    """Absolute weight changes and the share of entries above ``tau`` times the layer's largest change."""
    if m_clean.spec != m_poisoned.spec:
        raise ValidationError("weight_delta needs models with identical specs")
    if [w.shape for w in m_clean.weights] != [w.shape for w in m_poisoned.weights]:
        raise ValidationError("weight shapes differ")
    deltas = tuple(np.abs(a - b) for a, b in zip(m_clean.weights, m_poisoned.weights))
    fractions = []
    for d in deltas:
        peak = d.max() if d.size else 0.0
        fractions.append(float(np.mean(d > tau * peak)) if peak > 0 else 0.0)
    return SensitivityReport((), deltas, 0, tuple(fractions), tau)
