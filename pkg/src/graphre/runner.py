"""Config-driven experiment grids.

A config names one experiment kind, a dataset, model specs, attack configs
and a list of seeds. :func:`run_experiment` evaluates every grid cell for
every seed under the poisoning protocol (attack, apply, retrain, evaluate)
and writes::

    report.json        digest, per-cell mean/std, per-seed values, failures
    cells/NNN.json     one file per cell with its raw per-seed values
    tables/<kind>.csv  the grid shaped like a results table
    plots/<kind>.csv   long-format data for plotting
    cache/*.json       perturbations, reused across seeds and reruns

Seed roles: for a synthetic dataset the graph, the split and the attack all
follow the run seed. For file datasets the split and the attack are fixed
(``params.split_seed`` and ``params.attack_seed``, default 0) and the run
seed drives model initialisation and dropout, so seeds are repeated
training runs on one poisoned graph.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import (MetaConfig, Perturbation, adversarial_perturbation, apply_perturbation, budget_for,
                      mettack, nettack_targets, random_attack, surrogate_fit)
from .errors import ConfigError, GraphreError, ValidationError
from .graph import Graph, degree_vector, load_graph_dir, resolve_dataset, split_nodes
from .metrics import decision_surface, robustness_landscape, transfer_matrix
from .models import ARCHITECTURES, ModelSpec, TrainHyper, accuracy, train
from .structure import MEASURES, edge_profile
from .synth import SyntheticSpec, generate

logger = logging.getLogger(__name__)

KINDS = ("pattern_grid", "adv_training", "edge_profile", "arch_grid", "decision_surface", "transfer",
         "capacity", "landscape")
ATTACK_METHODS = ("none", "random", "mettack", "nettack")
DEFAULT_MUS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
DEFAULT_PROPORTIONS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
DEFAULT_POISON = {"method": "mettack", "rate": 0.05}
FOLLOW_SEED = "seed"


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    dataset: dict
    models: tuple
    attacks: tuple
    seeds: tuple
    split: dict
    train: dict
    params: dict
    output_dir: str | None = None
    base_dir: str = "."

    def semantic_dict(self) -> dict:
        """Every field that affects results, with defaults filled in."""
        return {"kind": self.kind, "dataset": self.dataset, "models": [m.to_dict() for m in self.models],
                "attacks": list(self.attacks), "seeds": list(self.seeds), "split": self.split,
                "train": self.train, "params": self.params}

    @property
    def digest(self) -> str:
        return config_digest(self.semantic_dict())

    def hyper(self, seed: int) -> TrainHyper:
        return TrainHyper.from_dict({**self.train, "seed": int(seed)})


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(semantic: dict) -> str:
    return hashlib.sha256(canonical_json(semantic).encode()).hexdigest()


def _is_seed(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_dataset(src, pointer, base_dir, errors):
    if not isinstance(src, dict) or len(src) != 1 or next(iter(src)) not in ("name", "path", "synthetic"):
        errors.append(f"{pointer}: dataset must be an object with exactly one of 'name', 'path', 'synthetic'")
        return None
    (key, value), = src.items()
    if key == "synthetic":
        if not isinstance(value, dict):
            errors.append(f"{pointer}/synthetic: must be an object")
            return None
        allowed = set(SyntheticSpec.__dataclass_fields__) - {"seed"}
        for k in sorted(set(value) - allowed):
            errors.append(f"{pointer}/synthetic/{k}: unknown generator field")
        try:
            SyntheticSpec(**{k: v for k, v in value.items() if k in allowed}).validate()
        except (GraphreError, TypeError) as exc:
            errors.append(f"{pointer}/synthetic: {exc}")
        return {"synthetic": dict(value)}
    if not isinstance(value, str) or not value:
        errors.append(f"{pointer}/{key}: must be a nonempty string")
        return None
    if key == "path":
        path = Path(value) if Path(value).is_absolute() else Path(base_dir) / value
        if not path.is_dir():
            errors.append(f"{pointer}/path: directory {str(path)!r} does not exist")
        return {"path": str(path)}
    try:
        resolve_dataset(value)
    except FileNotFoundError as exc:
        errors.append(f"{pointer}/name: {exc}")
    return {"name": value}


def _check_model(m, pointer, errors):
    if not isinstance(m, dict):
        errors.append(f"{pointer}: model spec must be an object")
        return None
    arch = m.get("architecture", "gcn")
    if arch not in ARCHITECTURES:
        errors.append(f"{pointer}/architecture: unknown architecture {arch!r}; expected one of {list(ARCHITECTURES)}")
        return None
    unknown = sorted(set(m) - set(ModelSpec.__dataclass_fields__))
    for k in unknown:
        errors.append(f"{pointer}/{k}: unknown model field")
    if unknown:
        return None
    try:
        return ModelSpec.from_dict(m)
    except (GraphreError, TypeError, ValueError) as exc:
        errors.append(f"{pointer}: {exc}")
        return None


def _check_attack(a, pointer, errors):
    if not isinstance(a, dict):
        errors.append(f"{pointer}: attack config must be an object")
        return None
    method = a.get("method")
    if method not in ATTACK_METHODS:
        errors.append(f"{pointer}/method: unknown attack method {method!r}; expected one of {list(ATTACK_METHODS)}")
        return None
    out = {"method": method}
    if method in ("random", "mettack"):
        rate = a.get("rate")
        if not _is_number(rate) or rate < 0:
            errors.append(f"{pointer}/rate: must be a non-negative number")
            return None
        out["rate"] = float(rate)
    if method == "mettack":
        meta = a.get("meta", {})
        try:
            MetaConfig.from_dict(meta)
            out["meta"] = dict(meta)
        except (GraphreError, TypeError, ValueError) as exc:
            errors.append(f"{pointer}/meta: {exc}")
    if method == "nettack":
        for key, default in (("budget", 4), ("num_targets", 10)):
            v = a.get(key, default)
            if not _is_seed(v) or v < 0:
                errors.append(f"{pointer}/{key}: must be a non-negative integer")
            out[key] = v
        cand = a.get("candidates", "default")
        if cand not in ("default", "all"):
            errors.append(f"{pointer}/candidates: must be 'default' or 'all'")
        out["candidates"] = cand
    extra = sorted(set(a) - {"method", "rate", "meta", "budget", "num_targets", "candidates"})
    for k in extra:
        errors.append(f"{pointer}/{k}: unknown attack field")
    return out


def _number_list(values, pointer, errors, lo=0.0, hi=1.0):
    if not isinstance(values, (list, tuple)) or not values or not all(_is_number(v) for v in values):
        errors.append(f"{pointer}: must be a nonempty list of numbers")
        return ()
    if any(not lo <= v <= hi for v in values):
        errors.append(f"{pointer}: values must lie in [{lo}, {hi}]")
    return tuple(float(v) for v in values)


def _check_params(kind, params, models, attacks, dataset, base_dir, errors):
    p = dict(params)
    out = {}
    for key in ("split_seed", "attack_seed"):
        default = FOLLOW_SEED if dataset and "synthetic" in dataset else 0
        v = p.pop(key, default)
        if v != FOLLOW_SEED and not _is_seed(v):
            errors.append(f"/params/{key}: must be an integer or {FOLLOW_SEED!r}")
        out[key] = v
    if kind == "pattern_grid":
        out["mus"] = _number_list(p.pop("mus", list(DEFAULT_MUS)), "/params/mus", errors)
        if dataset and "synthetic" not in dataset:
            errors.append("/dataset: pattern_grid needs a synthetic dataset")
    elif kind == "adv_training":
        out["proportions"] = _number_list(p.pop("proportions", list(DEFAULT_PROPORTIONS)), "/params/proportions",
                                          errors, 0.0, 0.5)
        poison = _check_attack(p.pop("poison", DEFAULT_POISON), "/params/poison", errors)
        out["poison"] = poison
        if len(models) != 1:
            errors.append("/models: adv_training takes exactly one model")
    elif kind == "transfer":
        if len(models) < 2:
            errors.append("/models: transfer needs at least two models")
        if len(attacks) != 1 or (attacks and attacks[0] and attacks[0]["method"] not in ("mettack", "random")):
            errors.append("/attacks: transfer takes exactly one mettack or random attack")
    elif kind == "capacity":
        out["layers"] = tuple(p.pop("layers", [2, 3, 4]))
        if not out["layers"] or not all(_is_seed(x) and 1 <= x <= 4 for x in out["layers"]):
            errors.append("/params/layers: must be a nonempty list of integers in 1..4")
        out["train_fracs"] = _number_list(p.pop("train_fracs", [0.1, 0.2, 0.3]), "/params/train_fracs", errors)
        if len(out["train_fracs"]) != len(out["layers"]):
            errors.append("/params/train_fracs: must pair one-to-one with /params/layers")
        extra = []
        for i, d in enumerate(p.pop("datasets", [])):
            extra.append(_check_dataset(d, f"/params/datasets/{i}", base_dir, errors))
        out["datasets"] = tuple(extra)
        labels = [dataset_label(d) for d in (dataset, *extra) if d]
        if len(set(labels)) != len(labels):
            errors.append("/params/datasets: datasets must be distinct")
        if len(models) != 1:
            errors.append("/models: capacity takes exactly one model; layers come from /params/layers")
        if len(attacks) != 1:
            errors.append("/attacks: capacity takes exactly one attack")
    elif kind == "landscape":
        out["alphas"] = _number_list(p.pop("alphas", [0.0, 0.05, 0.1]), "/params/alphas", errors)
        out["betas"] = _number_list(p.pop("betas", [0.0, 0.05, 0.1]), "/params/betas", errors)
        for key in ("alphas", "betas"):
            if out[key] and 0.0 not in out[key]:
                errors.append(f"/params/{key}: must include 0")
        spc = p.pop("seeds_per_cell", 1)
        if not _is_seed(spc) or spc < 1:
            errors.append("/params/seeds_per_cell: must be a positive integer")
        out["seeds_per_cell"] = spc
        if len(models) != 1:
            errors.append("/models: landscape takes exactly one model")
    for k in sorted(p):
        errors.append(f"/params/{k}: unknown parameter for {kind}")
    return out


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Validate a decoded config; raises :class:`ConfigError` listing every problem."""
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError(["/: config must be a JSON object"])
    known = {"kind", "dataset", "models", "attacks", "seeds", "split", "train", "params", "output_dir"}
    for k in sorted(set(raw) - known):
        errors.append(f"/{k}: unknown field")
    kind = raw.get("kind")
    if kind not in KINDS:
        errors.append(f"/kind: unknown experiment kind {kind!r}; expected one of {list(KINDS)}")
    dataset = _check_dataset(raw.get("dataset"), "/dataset", base_dir, errors) if "dataset" in raw else None
    if dataset is None and "dataset" not in raw:
        errors.append("/dataset: required")
    seeds = raw.get("seeds")
    if not isinstance(seeds, list) or not all(_is_seed(s) for s in seeds):
        errors.append("/seeds: must be a list of integers")
        seeds = []
    elif not seeds:
        errors.append("/seeds: seeds must be nonempty")
    elif len(set(seeds)) != len(seeds):
        errors.append("/seeds: seeds must be distinct")
    models_raw = raw.get("models", [{"architecture": "gcn"}])
    if not isinstance(models_raw, list) or not models_raw:
        errors.append("/models: must be a nonempty list")
        models_raw = []
    models = [_check_model(m, f"/models/{i}", errors) for i, m in enumerate(models_raw)]
    attacks_raw = raw.get("attacks", [{"method": "none"}])
    if not isinstance(attacks_raw, list) or not attacks_raw:
        errors.append("/attacks: must be a nonempty list")
        attacks_raw = []
    attacks = [_check_attack(a, f"/attacks/{i}", errors) for i, a in enumerate(attacks_raw)]
    split = raw.get("split", {})
    split = {"train_frac": split.get("train_frac", 0.1), "val_frac": split.get("val_frac", 0.1)} \
        if isinstance(split, dict) else None
    if split is None or not all(_is_number(v) and 0 <= v < 1 for v in split.values()) \
            or split["train_frac"] + split["val_frac"] >= 1:
        errors.append("/split: train_frac and val_frac must be fractions summing below 1")
    train_raw = raw.get("train", {})
    hyper = {}
    if not isinstance(train_raw, dict) or "seed" in train_raw:
        errors.append("/train: must be an object of training hyperparameters (seeds come from /seeds)")
    else:
        try:
            hyper = TrainHyper.from_dict(train_raw).to_dict()
            hyper.pop("seed", None)
        except (GraphreError, TypeError, ValueError) as exc:
            errors.append(f"/train: {exc}")
    params_raw = raw.get("params", {})
    if not isinstance(params_raw, dict):
        errors.append("/params: must be an object")
        params_raw = {}
    params = {}
    if kind in KINDS:
        params = _check_params(kind, params_raw, [m for m in models if m], [a for a in attacks if a],
                               dataset, base_dir, errors)
    out_dir = raw.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        errors.append("/output_dir: must be a string")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(kind, dataset, tuple(models), tuple(attacks), tuple(seeds), split, hyper,
                            _jsonable(params), out_dir, str(base_dir))


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"/: invalid JSON at line {exc.lineno}: {exc.msg}"]) from exc
    return parse_config(raw, base_dir=path.parent)


def validate_config(path) -> list:
    """Every schema and cross-reference problem as ``"<json pointer>: <message>"``; empty when valid."""
    try:
        load_config(path)
    except ConfigError as exc:
        return list(exc.errors)
    except OSError as exc:
        return [f"/: cannot read config: {exc}"]
    return []


# ---------------------------------------------------------------------------
# report

@dataclass
class CellResult:
    key: dict
    seeds: list
    values: dict  # metric -> per-seed list, aligned with seeds
    errors: dict = field(default_factory=dict)  # seed -> message

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def mean(self) -> dict:
        if self.failed:
            return {}
        return {m: float(np.mean(v)) for m, v in self.values.items()}

    def std(self) -> dict:
        if self.failed:
            return {}
        return {m: float(np.std(v)) for m, v in self.values.items()}

    def to_dict(self):
        return {"key": self.key, "seeds": self.seeds, "values": self.values, "mean": self.mean(),
                "std": self.std(), "errors": {str(s): e for s, e in self.errors.items()}}

    @classmethod
    def from_dict(cls, d) -> "CellResult":
        return cls(d["key"], list(d["seeds"]), {k: list(v) for k, v in d["values"].items()},
                   {int(s): e for s, e in d.get("errors", {}).items()})


@dataclass
class RunReport:
    digest: str
    kind: str
    config: dict
    cells: list
    runtime_s: float = 0.0
    artifacts: list = field(default_factory=list)

    @property
    def failed_cells(self) -> list:
        return [c for c in self.cells if c.failed]

    @property
    def ok(self) -> bool:
        return not self.failed_cells

    def cell(self, **key) -> CellResult:
        for c in self.cells:
            if all(c.key.get(k) == v for k, v in key.items()):
                return c
        raise KeyError(key)

    def to_dict(self):
        return {"digest": self.digest, "kind": self.kind, "config": self.config,
                "cells": [c.to_dict() for c in self.cells],
                "failed": [c.key for c in self.failed_cells], "runtime_s": self.runtime_s,
                "artifacts": self.artifacts}

    @classmethod
    def from_dict(cls, d) -> "RunReport":
        return cls(d["digest"], d["kind"], d["config"], [CellResult.from_dict(c) for c in d["cells"]],
                   d.get("runtime_s", 0.0), list(d.get("artifacts", [])))

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# execution context

def attack_label(a: dict) -> str:
    if a["method"] == "none":
        return "clean"
    if a["method"] == "nettack":
        return f"nettack({a['budget']})"
    return f"{a['method']}({a['rate']:g})"


def attack_rate(a: dict) -> float:
    """Numeric x-axis value of an attack: rate, per-target budget for Nettack, 0 for none."""
    if a["method"] == "none":
        return 0.0
    if a["method"] == "nettack":
        return float(a["budget"])
    return a["rate"]


def model_label(m: ModelSpec) -> str:
    return m.architecture if m.num_layers == 2 else f"{m.architecture}-{m.num_layers}"


def _resolve_seed(value, seed):
    return int(seed) if value == FOLLOW_SEED else int(value)


class _Context:
    """Per-process caches for graphs and perturbations."""

    def __init__(self, cfg: ExperimentConfig, cache_dir: Path | None):
        self.cfg = cfg
        self.cache_dir = cache_dir
        self._graphs = {}
        self._attacks = {}

    def graph(self, source: dict, seed: int, mu: float | None = None) -> Graph:
        if "synthetic" in source:
            spec = {**source["synthetic"], "seed": int(seed)}
            if mu is not None:
                spec["mu"] = mu
            key = canonical_json(spec)
            if key not in self._graphs:
                self._graphs[key] = generate(SyntheticSpec(**spec))[0]
            return self._graphs[key]
        path = source.get("path") or str(resolve_dataset(source["name"]))
        if path not in self._graphs:
            self._graphs[path] = load_graph_dir(path)
        return self._graphs[path]

    def split(self, g: Graph, seed: int, train_frac: float | None = None):
        s = _resolve_seed(self.cfg.params["split_seed"], seed)
        tf = self.cfg.split["train_frac"] if train_frac is None else train_frac
        return split_nodes(g, tf, self.cfg.split["val_frac"], s)

    def _longest_rate(self, attack: dict) -> float:
        """Largest rate among configured attacks sharing this method and meta (prefix reuse)."""
        same = [a for a in self._all_attacks() if a["method"] == attack["method"]
                and a.get("meta", {}) == attack.get("meta", {})]
        return max([a["rate"] for a in same] + [attack["rate"]])

    def _all_attacks(self):
        extra = [self.cfg.params["poison"]] if self.cfg.kind == "adv_training" else []
        return list(self.cfg.attacks) + extra

    def perturbation(self, g: Graph, split, attack: dict, seed: int, graph_key: str) -> Perturbation | None:
        if attack["method"] == "none":
            return None
        s = _resolve_seed(self.cfg.params["attack_seed"], seed)
        if attack["method"] == "mettack":
            rate = self._longest_rate(attack)
            full = self._cached(("mettack", graph_key, split_digest(split), canonical_json(attack.get("meta", {})),
                                 rate, s), lambda: mettack(g, split, rate, attack.get("meta"), s))
            return full.truncate(budget_for(attack["rate"], g.num_edges))
        if attack["method"] == "random":
            return self._cached(("random", graph_key, attack["rate"], s), lambda: random_attack(g, attack["rate"], s))
        return self._cached(("nettack", graph_key, split_digest(split), canonical_json(attack), s),
                            lambda: _nettack_run(g, split, attack, s))

    def augmentation(self, g: Graph, split, proportion: float, seed: int, graph_key: str) -> Perturbation:
        s = _resolve_seed(self.cfg.params["attack_seed"], seed)
        top = max(self.cfg.params["proportions"])
        meta = self.cfg.params["poison"].get("meta")
        full = self._cached(("augment", graph_key, split_digest(split), canonical_json(meta or {}), top, s),
                            lambda: adversarial_perturbation(g, top, s, split, meta))
        return full.truncate(budget_for(proportion, g.num_edges))

    def _cached(self, key, compute) -> Perturbation:
        token = hashlib.sha256(canonical_json([str(k) for k in key]).encode()).hexdigest()[:24]
        if token in self._attacks:
            return self._attacks[token]
        path = self.cache_dir / f"{token}.json" if self.cache_dir else None
        if path is not None and path.exists():
            p = Perturbation.from_dict(json.loads(path.read_text()))
        else:
            p = compute()
            if path is not None:
                tmp = path.with_suffix(f".{os.getpid()}.tmp")
                tmp.write_text(canonical_json(p.to_dict()))
                os.replace(tmp, path)
        self._attacks[token] = p
        return p


def split_digest(split) -> str:
    return hashlib.sha256(canonical_json(split.to_dict()).encode()).hexdigest()[:16]


def _nettack_run(g: Graph, split, attack: dict, seed: int) -> Perturbation:
    """Nettack against ``num_targets`` test nodes drawn with ``seed`` (isolated nodes skipped)."""
    candidates = split.test[degree_vector(g)[split.test] > 0]
    k = min(attack["num_targets"], len(candidates))
    rng = np.random.default_rng([seed, 11])
    targets = np.sort(rng.choice(candidates, size=k, replace=False))
    s = surrogate_fit(g, split)
    return nettack_targets(g, s, targets, attack["budget"], attack["candidates"], seed)


def _eval_nodes(split, p: Perturbation | None):
    """Targeted attacks are scored on their targets, everything else on the test split."""
    if p is not None and p.target_nodes is not None:
        return np.asarray(p.target_nodes, dtype=np.int64)
    return split.test


def _poisoned(g, p):
    return g if p is None else apply_perturbation(g, p)


# ---------------------------------------------------------------------------
# per-kind cell evaluation; each returns [(key, {metric: value} | exception)]

def _guard(fn):
    try:
        return fn()
    except GraphreError as exc:
        return exc
    except (ValueError, ArithmeticError, FloatingPointError) as exc:
        return exc


def _cells_model_attack(ctx: _Context, seed: int, metric_fn):
    cfg = ctx.cfg
    g = ctx.graph(cfg.dataset, seed)
    split = ctx.split(g, seed)
    gkey = canonical_json(cfg.dataset) + f"#{seed if 'synthetic' in cfg.dataset else ''}"
    out = []
    for a in cfg.attacks:
        p = _guard(lambda: ctx.perturbation(g, split, a, seed, gkey))
        for m in cfg.models:
            key = {"model": model_label(m), "attack": attack_label(a), "ptb_rate": attack_rate(a)}
            if isinstance(p, Exception):
                out.append((key, p))
                continue
            pg = _poisoned(g, p)
            out.append((key, _guard(lambda: metric_fn(cfg, m, pg, split, p, seed))))
    return out


def _accuracy_metrics(cfg, m, pg, split, p, seed):
    model = train(m, pg, split, cfg.hyper(seed))
    return {"accuracy": accuracy(model, pg, _eval_nodes(split, p))}


def _margin_metrics(cfg, m, pg, split, p, seed):
    model = train(m, pg, split, cfg.hyper(seed))
    nodes = _eval_nodes(split, p)
    rep = decision_surface(model, pg, nodes)
    return {"mean_margin": rep.mean_margin, "fraction_negative": rep.fraction_negative,
            "accuracy": accuracy(model, pg, nodes)}


def _seed_arch_grid(ctx, seed):
    return _cells_model_attack(ctx, seed, _accuracy_metrics)


def _seed_decision_surface(ctx, seed):
    return _cells_model_attack(ctx, seed, _margin_metrics)


def _seed_pattern_grid(ctx, seed):
    cfg = ctx.cfg
    out = []
    for mu in cfg.params["mus"]:
        g = _guard(lambda: ctx.graph(cfg.dataset, seed, mu))
        split = None if isinstance(g, Exception) else _guard(lambda: ctx.split(g, seed))
        gkey = f"{canonical_json(cfg.dataset)}#{seed}#mu={mu!r}"
        for a in cfg.attacks:
            fail = g if isinstance(g, Exception) else split if isinstance(split, Exception) else None
            p = fail or _guard(lambda: ctx.perturbation(g, split, a, seed, gkey))
            for m in cfg.models:
                key = {"model": model_label(m), "attack": attack_label(a), "ptb_rate": attack_rate(a), "mu": mu}
                if isinstance(p, Exception):
                    out.append((key, p))
                    continue
                pg = _poisoned(g, p)
                out.append((key, _guard(lambda: _accuracy_metrics(cfg, m, pg, split, p, seed))))
    return out


def _seed_adv_training(ctx, seed):
    cfg = ctx.cfg
    m = cfg.models[0]
    g = ctx.graph(cfg.dataset, seed)
    split = ctx.split(g, seed)
    gkey = canonical_json(cfg.dataset) + f"#{seed if 'synthetic' in cfg.dataset else ''}"
    out = []
    p = _guard(lambda: ctx.perturbation(g, split, cfg.params["poison"], seed, gkey))
    pg = None if isinstance(p, Exception) else _poisoned(g, p)
    for prop in cfg.params["proportions"]:
        key = {"model": model_label(m), "poison": attack_label(cfg.params["poison"]), "proportion": prop}
        if pg is None:
            out.append((key, p))
            continue

        def cell():
            aug = ctx.augmentation(pg, split, prop, seed, gkey + "#poisoned")
            model = train(m, apply_perturbation(pg, aug), split, cfg.hyper(seed))
            # trained on the augmented graph, evaluated on the poisoned graph it was derived from
            return {"accuracy": accuracy(model, pg, split.test)}
        out.append((key, _guard(cell)))
    return out


def _seed_edge_profile(ctx, seed):
    cfg = ctx.cfg
    g = ctx.graph(cfg.dataset, seed)
    split = ctx.split(g, seed)
    gkey = canonical_json(cfg.dataset) + f"#{seed if 'synthetic' in cfg.dataset else ''}"
    out = []
    for a in cfg.attacks:
        key = {"attack": attack_label(a), "ptb_rate": attack_rate(a)}

        def cell():
            p = ctx.perturbation(g, split, a, seed, gkey)
            if p is None:
                raise ValidationError("edge_profile needs an attack; 'none' has no perturbed population")
            prof = edge_profile(g, p)
            values = {}
            for mname in MEASURES:
                values[f"clean_{mname}"] = prof.clean_mean[mname]
                values[f"perturbed_{mname}"] = prof.perturbed_mean[mname]
            return values
        out.append((key, _guard(cell)))
    return out


def _seed_capacity(ctx, seed):
    cfg = ctx.cfg
    base = cfg.models[0]
    a = cfg.attacks[0]
    out = []
    for source in (cfg.dataset, *cfg.params["datasets"]):
        g = ctx.graph(source, seed)
        gkey = canonical_json(source) + f"#{seed if 'synthetic' in source else ''}"
        name = dataset_label(source)
        for layers, frac in zip(cfg.params["layers"], cfg.params["train_fracs"]):
            key = {"dataset": name, "layers": layers, "train_frac": frac, "attack": attack_label(a)}

            def cell():
                split = ctx.split(g, seed, frac)
                p = ctx.perturbation(g, split, a, seed, gkey)
                pg = _poisoned(g, p)
                spec = ModelSpec.from_dict({**base.to_dict(), "num_layers": layers})
                return {"accuracy": accuracy(train(spec, pg, split, cfg.hyper(seed)), pg, _eval_nodes(split, p))}
            out.append((key, _guard(cell)))
    return out


def _seed_landscape(ctx, seed):
    cfg = ctx.cfg
    m = cfg.models[0]
    g = ctx.graph(cfg.dataset, seed)
    split = ctx.split(g, seed)
    spc = cfg.params["seeds_per_cell"]
    grid = _guard(lambda: robustness_landscape(m, g, split, cfg.params["alphas"], cfg.params["betas"], spc,
                                               seed * spc, _hyper_template(cfg)))
    out = []
    for i, alpha in enumerate(cfg.params["alphas"]):
        for j, beta in enumerate(cfg.params["betas"]):
            key = {"model": model_label(m), "alpha": alpha, "beta": beta}
            out.append((key, grid if isinstance(grid, Exception) else {"mean_margin": float(grid.values[i, j])}))
    return out


def _hyper_template(cfg):
    return TrainHyper.from_dict({**cfg.train, "seed": 0})


def _run_transfer(ctx):
    """All seeds in one pass: each source perturbation is crafted once, target training repeats per seed."""
    cfg = ctx.cfg
    seed0 = cfg.seeds[0]
    specs = {model_label(m): m for m in cfg.models}
    attack = cfg.attacks[0]
    attack_cfg = {"method": attack["method"], "rate": attack["rate"], "meta": attack.get("meta", {})}
    attack_seed = _resolve_seed(cfg.params["attack_seed"], seed0)

    def matrix():
        g = ctx.graph(cfg.dataset, seed0)
        return transfer_matrix(specs, g, ctx.split(g, seed0), attack_cfg, cfg.seeds, _hyper_template(cfg),
                               attack_seed=attack_seed)
    tm = _guard(matrix)
    cells = []
    for src in specs:
        for tgt in specs:
            key = {"source": src, "target": tgt}
            if isinstance(tm, Exception):
                cells.append(CellResult(key, list(cfg.seeds), {}, {s: _describe(tm) for s in cfg.seeds}))
            else:
                runs = [float(x) for x in tm.per_seed[(src, tgt)]]
                cells.append(CellResult(key, list(cfg.seeds), {"accuracy": runs}))
    return cells


def dataset_label(source: dict) -> str:
    if "name" in source:
        return source["name"]
    if "path" in source:
        return Path(source["path"]).name
    spec = SyntheticSpec(**source["synthetic"])
    return (f"synthetic-n{spec.num_nodes}-k{spec.num_communities}-mu{spec.mu:g}"
            f"-d{spec.avg_degree:g}-x{spec.degree_exponent:g}")


_SEED_RUNNERS = {
    "pattern_grid": _seed_pattern_grid, "adv_training": _seed_adv_training, "edge_profile": _seed_edge_profile,
    "arch_grid": _seed_arch_grid, "decision_surface": _seed_decision_surface, "capacity": _seed_capacity,
    "landscape": _seed_landscape,
}


def _describe(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


def _run_seed(cfg: ExperimentConfig, cache_dir, seed):
    ctx = _Context(cfg, Path(cache_dir) if cache_dir else None)
    try:
        return [(key, val if not isinstance(val, Exception) else _describe(val))
                for key, val in _SEED_RUNNERS[cfg.kind](ctx, seed)]
    except (GraphreError, OSError, ValueError) as exc:
        return _describe(exc)


def cell_keys(cfg: ExperimentConfig) -> list:
    """Every cell the config asks for, in table order."""
    prm = cfg.params
    if cfg.kind in ("arch_grid", "decision_surface"):
        return [{"model": model_label(m), "attack": attack_label(a), "ptb_rate": attack_rate(a)}
                for a in cfg.attacks for m in cfg.models]
    if cfg.kind == "pattern_grid":
        return [{"model": model_label(m), "attack": attack_label(a), "ptb_rate": attack_rate(a), "mu": mu}
                for mu in prm["mus"] for a in cfg.attacks for m in cfg.models]
    if cfg.kind == "adv_training":
        return [{"model": model_label(cfg.models[0]), "poison": attack_label(prm["poison"]), "proportion": p}
                for p in prm["proportions"]]
    if cfg.kind == "edge_profile":
        return [{"attack": attack_label(a), "ptb_rate": attack_rate(a)} for a in cfg.attacks]
    if cfg.kind == "capacity":
        return [{"dataset": dataset_label(src), "layers": layers, "train_frac": frac,
                 "attack": attack_label(cfg.attacks[0])}
                for src in (cfg.dataset, *prm["datasets"]) for layers, frac in zip(prm["layers"], prm["train_fracs"])]
    if cfg.kind == "landscape":
        return [{"model": model_label(cfg.models[0]), "alpha": a, "beta": b}
                for a in prm["alphas"] for b in prm["betas"]]
    labels = [model_label(m) for m in cfg.models]
    return [{"source": s, "target": t} for s in labels for t in labels]


def _assemble(cfg, per_seed) -> list:
    order = [canonical_json(k) for k in cell_keys(cfg)]
    cells = {k: CellResult(key, [], {}) for k, key in zip(order, cell_keys(cfg))}
    for seed, results in zip(cfg.seeds, per_seed):
        if isinstance(results, str):
            # the seed failed before any cell ran (e.g. graph or split construction)
            for cell in cells.values():
                cell.seeds.append(seed)
                cell.errors[seed] = results
            continue
        for key, val in results:
            cell = cells[canonical_json(key)]
            cell.seeds.append(seed)
            if isinstance(val, str):
                cell.errors[seed] = val
            else:
                for metric, x in val.items():
                    cell.values.setdefault(metric, []).append(float(x))
    return [cells[k] for k in order]


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> RunReport:
    """Evaluate the grid, write the report files and return the report."""
    start = time.perf_counter()
    out = Path(out_dir or cfg.output_dir or "runs/" + cfg.digest[:12])
    if not Path(out).is_absolute() and out_dir is None and cfg.output_dir:
        out = Path(cfg.base_dir) / out
    for sub in ("cells", "tables", "plots", "cache"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cache = str(out / "cache")
    if cfg.kind == "transfer":
        cells = _run_transfer(_Context(cfg, Path(cache)))
    else:
        if jobs > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                per_seed = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), [cache] * len(cfg.seeds), cfg.seeds))
        else:
            per_seed = [_run_seed(cfg, cache, s) for s in cfg.seeds]
        cells = _assemble(cfg, per_seed)
    report = RunReport(cfg.digest, cfg.kind, cfg.semantic_dict(), cells)
    artifacts = []
    for i, c in enumerate(cells):
        path = out / "cells" / f"{i:03d}.json"
        _write_text(path, json.dumps(c.to_dict(), indent=1, sort_keys=True))
        artifacts.append(str(path.relative_to(out)))
    table = out / "tables" / f"{cfg.kind}.csv"
    _write_text(table, _csv(table_rows(report)))
    artifacts.append(str(table.relative_to(out)))
    if not report.failed_cells:
        artifacts += [str(p.relative_to(out)) for p in emit_plot_data(report, cfg.kind, out / "plots")]
    report.artifacts = artifacts + ["report.json"]
    report.runtime_s = round(time.perf_counter() - start, 3)
    _write_text(out / "report.json", json.dumps(report.to_dict(), indent=1, sort_keys=True))
    for c in report.failed_cells:
        logger.error("cell %s failed: %s", c.key, next(iter(c.errors.values())))
    return report


def _write_text(path: Path, text: str):
    path.write_text(text if text.endswith("\n") else text + "\n")


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return "nan" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# tables and plot data

def table_rows(report: RunReport) -> list:
    """Results grid as CSV rows; failed cells appear as ``failed``."""
    kind = report.kind

    def value(cell, metric):
        if cell.failed:
            return "failed"
        mean, std = cell.mean()[metric], cell.std()[metric]
        return f"{mean:.4f}±{std:.4f}"

    if kind == "pattern_grid":
        mus = _unique(c.key["mu"] for c in report.cells)
        rows = [["model", "attack", *[f"mu={m:g}" for m in mus]]]
        for model, atk in _unique((c.key["model"], c.key["attack"]) for c in report.cells):
            rows.append([model, atk, *[value(report.cell(model=model, attack=atk, mu=m), "accuracy") for m in mus]])
        return rows
    if kind == "adv_training":
        props = _unique(c.key["proportion"] for c in report.cells)
        return [["model", *[f"{p:g}" for p in props]],
                [report.cells[0].key["model"], *[value(report.cell(proportion=p), "accuracy") for p in props]]]
    if kind == "edge_profile":
        attacks = _unique(c.key["attack"] for c in report.cells)
        rows = [["measure", *[f"{a} {pop}" for a in attacks for pop in ("clean", "perturbed")]]]
        for m in MEASURES:
            rows.append([m, *[value(report.cell(attack=a), f"{pop}_{m}") if not report.cell(attack=a).failed
                              else "failed" for a in attacks for pop in ("clean", "perturbed")]])
        return rows
    if kind in ("arch_grid", "decision_surface"):
        metric = "accuracy" if kind == "arch_grid" else "mean_margin"
        attacks = _unique(c.key["attack"] for c in report.cells)
        rows = [["model", *attacks]]
        for model in _unique(c.key["model"] for c in report.cells):
            rows.append([model, *[value(report.cell(model=model, attack=a), metric) for a in attacks]])
        return rows
    if kind == "transfer":
        ids = _unique(c.key["source"] for c in report.cells)
        rows = [["source\\target", *ids]]
        for s in ids:
            rows.append([s, *[value(report.cell(source=s, target=t), "accuracy") for t in ids]])
        return rows
    if kind == "capacity":
        rows = [["dataset", "layers", "train_frac", "accuracy"]]
        for c in report.cells:
            rows.append([c.key["dataset"], c.key["layers"], c.key["train_frac"], value(c, "accuracy")])
        return rows
    if kind == "landscape":
        betas = _unique(c.key["beta"] for c in report.cells)
        rows = [["alpha\\beta", *[f"{b:g}" for b in betas]]]
        for a in _unique(c.key["alpha"] for c in report.cells):
            rows.append([f"{a:g}", *[value(report.cell(alpha=a, beta=b), "mean_margin") for b in betas]])
        return rows
    raise ValidationError(f"unknown experiment kind {kind!r}")


def _unique(items):
    seen = []
    for x in items:
        if x not in seen:
            seen.append(x)
    return seen


def transfer_atr(report: RunReport):
    """(ids, ATR matrix) from the mean transfer accuracies; rows are sources, columns targets."""
    from .metrics import atr

    ids = _unique(c.key["source"] for c in report.cells)
    acc = np.array([[report.cell(source=s, target=t).mean()["accuracy"] for t in ids] for s in ids])
    specific = np.diag(acc)
    return ids, np.array([[atr(acc[i, j], specific[j]) for j in range(len(ids))] for i in range(len(ids))])


PLOT_SCHEMAS = {
    "decision_surface": ("model", "ptb_rate", "mean_margin"),
    "capacity": ("layers", "train_frac", "dataset", "accuracy"),
    "pattern_grid": ("mu", "model", "ptb_rate", "accuracy"),
    "adv_training": ("proportion", "accuracy"),
    "arch_grid": ("model", "ptb_rate", "accuracy"),
    "edge_profile": ("attack", "measure", "clean", "perturbed"),
    "landscape": ("alpha", "beta", "mean_margin"),
}


def emit_plot_data(report: RunReport, kind: str, out_dir) -> list:
    """Write the plot CSV for ``kind``; the transfer plot is a square ATR matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if report.kind != kind:
        raise ValidationError(f"report holds {report.kind!r} cells, not {kind!r}")
    if not report.cells:
        raise ValidationError(f"report has no {kind} cells")
    missing = [c.key for c in report.failed_cells]
    if missing:
        raise ValidationError(f"cannot plot {kind}: cells {missing} failed")
    path = out_dir / f"{kind}.csv"
    if kind == "transfer":
        ids, rates = transfer_atr(report)
        rows = [["source\\target", *ids]] + [[s, *[_fmt(x) for x in row]] for s, row in zip(ids, rates)]
        _write_text(path, _csv(rows))
        return [path]
    if kind not in PLOT_SCHEMAS:
        raise ValidationError(f"no plot schema for {kind!r}")
    columns = PLOT_SCHEMAS[kind]
    rows = [list(columns)]
    for c in report.cells:
        mean = c.mean()
        if kind == "edge_profile":
            for m in MEASURES:
                rows.append([c.key["attack"], m, _fmt(mean[f"clean_{m}"]), _fmt(mean[f"perturbed_{m}"])])
            continue
        rows.append([c.key[col] if col in c.key else _fmt(mean[col]) for col in columns])
    _write_text(path, _csv(rows))
    return [path]
