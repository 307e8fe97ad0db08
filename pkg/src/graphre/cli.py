"""Command-line entry point: ``graphre <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, GraphreError


def _graph(path):
    from .graph import load_graph_dir, resolve_dataset

    return load_graph_dir(resolve_dataset(path))


def _split(g, args):
    from .graph import split_nodes

    return split_nodes(g, args.train_frac, args.val_frac, args.split_seed)


def _add_split_args(p):
    p.add_argument("--train-frac", type=float, default=0.1)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)


def _add_model_args(p):
    from .models import ARCHITECTURES

    p.add_argument("--arch", choices=ARCHITECTURES, default="gcn")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.5)


def _model_spec(args):
    from .models import ModelSpec

    return ModelSpec(args.arch, args.layers, args.hidden, args.dropout)


def cmd_run(args):
    from .runner import load_config, run_experiment

    cfg = load_config(args.config)
    report = run_experiment(cfg, out_dir=args.out, jobs=args.jobs)
    print(json.dumps({"digest": report.digest, "cells": len(report.cells),
                      "failed": [c.key for c in report.failed_cells], "runtime_s": report.runtime_s}))
    return 0 if report.ok else 1


def cmd_validate(args):
    from .runner import validate_config

    errors = validate_config(args.config)
    for e in errors:
        print(e, file=sys.stderr)
    if not errors:
        print("ok")
    return 1 if errors else 0


def cmd_synth(args):
    from .graph import save_graph
    from .synth import SyntheticSpec, generate, mixing_fraction

    spec = SyntheticSpec(args.n, args.communities, args.mu, args.avg_degree, args.exponent, args.seed)
    g, communities = generate(spec)
    out = Path(args.out)
    save_graph(g, out)
    with open(out / "communities.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "community"])
        w.writerows(enumerate(communities.tolist()))
    print(json.dumps({"nodes": g.num_nodes, "edges": g.num_edges, "mixing": mixing_fraction(g, communities)}))
    return 0


def cmd_train(args):
    from .models import ModelSpec, TrainHyper, accuracy, save_checkpoint, train

    g = _graph(args.graph)
    split = _split(g, args)
    spec = _model_spec(args)
    hyper = TrainHyper(args.lr, args.weight_decay, args.momentum, args.epochs, args.seed)
    if args.config:
        # {"model": {...ModelSpec fields}, "train": {...TrainHyper fields}}; flags fill the rest
        cfg = json.loads(Path(args.config).read_text())
        spec = ModelSpec.from_dict({**spec.to_dict(), **cfg.get("model", {})})
        hyper = TrainHyper.from_dict({**hyper.to_dict(), **cfg.get("train", {})})
    m = train(spec, g, split, hyper)
    if args.out:
        save_checkpoint(m, args.out)
    print(json.dumps({"test_accuracy": accuracy(m, g, split.test),
                      "val_accuracy": m.train_meta.get("final_val_accuracy")}))
    return 0


def cmd_attack(args):
    from .attacks import mettack, nettack, random_attack, save_perturbation, surrogate_fit

    g = _graph(args.graph)
    if args.method == "random":
        p = random_attack(g, args.rate, args.seed)
    elif args.method == "mettack":
        p = mettack(g, _split(g, args), args.rate, {"inner_epochs": args.inner_epochs}, args.seed,
                    budget=args.budget)
    else:
        if args.target is None:
            raise GraphreError("nettack needs --target")
        s = surrogate_fit(g, _split(g, args))
        p = nettack(g, s, args.target, args.budget if args.budget is not None else 4, args.candidates)
    save_perturbation(p, args.out)
    print(json.dumps({"flips": len(p.flips), "added": p.num_added, "removed": p.num_removed,
                      "stop_reason": p.stop_reason}))
    return 0


def cmd_eval(args):
    from .attacks import apply_perturbation, load_perturbation
    from .metrics import decision_surface
    from .models import TrainHyper, accuracy, load_checkpoint, train

    g = _graph(args.graph)
    split = _split(g, args)
    if args.perturbation:
        g = apply_perturbation(g, load_perturbation(args.perturbation))
    if args.model:
        m = load_checkpoint(args.model)
    else:
        # poisoning protocol: retrain on the (possibly perturbed) graph
        m = train(_model_spec(args), g, split, TrainHyper(seed=args.seed))
    rep = decision_surface(m, g, split.test)
    print(json.dumps({"test_accuracy": accuracy(m, g, split.test), "mean_margin": rep.mean_margin,
                      "fraction_negative": rep.fraction_negative}))
    return 0


def cmd_profile(args):
    from .attacks import load_perturbation
    from .structure import edge_profile

    g = _graph(args.graph)
    prof = edge_profile(g, load_perturbation(args.perturbation))
    with open(args.out, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(prof.to_rows())
    for m, pop in prof.empty:
        print(f"warning: {pop} population for {m} is empty; mean reported as nan", file=sys.stderr)
    return 0


def cmd_transfer(args):
    from .metrics import transfer_matrix
    from .models import ModelSpec

    g = _graph(args.graph)
    specs = {a: ModelSpec(a, 2, 16, 0.5) for a in args.models}
    tm = transfer_matrix(specs, g, _split(g, args), {"method": args.method, "rate": args.rate,
                                                       "meta": {"inner_epochs": args.inner_epochs}}, args.seeds)
    rows = [["source\\target", *tm.targets]]
    rows += [[s, *[repr(float(x)) for x in row]] for s, row in zip(tm.sources, tm.atr)]
    with open(args.out, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return 0


def cmd_prepare_data(args):
    from .datasets import prepare
    from .graph import save_graph

    g = prepare(args.name, args.raw)
    save_graph(g, args.out, compress_features=True)
    print(json.dumps({"nodes": g.num_nodes, "edges": g.num_edges, "features": g.num_features,
                      "classes": g.num_classes}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphre", description="Graph robustness experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("validate", help="check an experiment config without running it")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("synth", help="generate a community graph")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--communities", type=int, default=5)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--avg-degree", type=float, default=10.0)
    p.add_argument("--exponent", type=float, default=0.0, help="power-law degree exponent (0: regular)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model and report accuracy")
    p.add_argument("--graph", required=True)
    p.add_argument("--config", help="JSON with optional 'model' and 'train' objects")
    _add_model_args(p)
    _add_split_args(p)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="compute a perturbation")
    p.add_argument("--graph", required=True)
    p.add_argument("--method", choices=("mettack", "nettack", "random"), required=True)
    p.add_argument("--rate", type=float, default=0.05)
    p.add_argument("--budget", type=int)
    p.add_argument("--target", type=int)
    p.add_argument("--candidates", choices=("default", "all"), default="default")
    p.add_argument("--inner-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_split_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="accuracy and decision margin on the test split")
    p.add_argument("--graph", required=True)
    p.add_argument("--perturbation")
    p.add_argument("--model", help="checkpoint; without it a model is retrained on the graph")
    _add_model_args(p)
    _add_split_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="structural profile of a perturbation")
    p.add_argument("--graph", required=True)
    p.add_argument("--perturbation", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("transfer", help="attack transfer-rate matrix")
    p.add_argument("--graph", required=True)
    p.add_argument("--models", nargs="+", default=["gcn", "sgc", "appnp", "gin"])
    p.add_argument("--method", choices=("mettack", "random"), default="mettack")
    p.add_argument("--rate", type=float, default=0.05)
    p.add_argument("--inner-epochs", type=int, default=100)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    _add_split_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("prepare-data", help="build a dataset directory from raw files")
    p.add_argument("--name", choices=("cora", "citeseer"), required=True)
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prepare_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(e, file=sys.stderr)
        return 2
    except (GraphreError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
