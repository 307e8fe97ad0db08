"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that ``conftest.pytest_terminal_summary``
prints at the end of the session, then asserts the same condition. Expensive
Mettack runs on Cora are cached under ``.acceptance-cache/`` together with the
seconds they took, so criterion 8 can count the attack in its runtime.
"""

import hashlib
import itertools
import json
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest
import scipy.sparse as sp

from graphre import autodiff as ad
from graphre.attacks import (MetaConfig, Perturbation, adversarial_perturbation, apply_perturbation, budget_for,
                             mettack, nettack)
from graphre.attacks.mettack import attack_loss, build_problem, meta_gradient
from graphre.graph import load_graph_dir, split_nodes
from graphre.metrics import atr, logit_margins, robustness_landscape, decision_surface, transfer_matrix
from graphre.models import ModelSpec, TrainHyper, accuracy, forward, graph_ops, init_weights, train
from graphre.structure import MEASURES, edge_measures, edge_profile, node_measures
from graphre.synth import SyntheticSpec, generate, structural_regularity

from conftest import DATA, ROOT, VERDICTS, dataset_available, random_graph
from test_attacks import default_pairs, nettack_instance, oracle_choice
from test_structure import path_oracle

CACHE = ROOT / ".acceptance-cache"
SEEDS = range(10)


def verdict(criterion, ok, detail, seconds, limit):
    in_time = seconds < limit
    status = "PASS" if ok and in_time else "FAIL"
    VERDICTS.append(f"criterion {criterion:>3}: {status}  {detail}  [{seconds:.1f}s / limit {limit:.0f}s]")
    assert ok, detail
    assert in_time, f"took {seconds:.1f}s, limit {limit:.0f}s"


def cached_mettack(name, g, split, rate, seed=0):
    """Mettack perturbation and the seconds it took, cached on disk by its inputs."""
    key = hashlib.sha256(json.dumps([name, g.num_nodes, g.num_edges, split.train.tolist()[:50], rate, seed,
                                     repr(MetaConfig())]).encode()).hexdigest()[:16]
    path = CACHE / f"{name}-mettack-{rate}-{key}.json"
    if path.exists():
        d = json.loads(path.read_text())
        return Perturbation.from_dict(d["perturbation"]), d["seconds"]
    start = time.perf_counter()
    p = mettack(g, split, rate, seed=seed)
    seconds = time.perf_counter() - start
    CACHE.mkdir(exist_ok=True)
    path.write_text(json.dumps({"perturbation": p.to_dict(), "seconds": seconds}))
    return p, seconds


def mean_test_accuracy(g_train, split, g_eval=None, seeds=SEEDS):
    g_eval = g_train if g_eval is None else g_eval
    return float(np.mean([accuracy(train(ModelSpec(), g_train, split, TrainHyper(seed=s)), g_eval, split.test)
                          for s in seeds]))


def rates_trend(g, split, p_full, seeds=SEEDS):
    """Mean accuracy at rates 0, 0.05 and 0.10 using prefixes of one 0.10 run."""
    accs = [mean_test_accuracy(g, split, seeds=seeds)]
    for rate in (0.05, 0.10):
        accs.append(mean_test_accuracy(apply_perturbation(g, p_full.truncate(budget_for(rate, g.num_edges))),
                                       split, seeds=seeds))
    return accs


def strictly_decreasing(xs):
    return all(a > b for a, b in zip(xs, xs[1:]))


needs_cora = pytest.mark.skipif(not dataset_available("cora"), reason="data/cora missing")
needs_citeseer = pytest.mark.skipif(not dataset_available("citeseer"), reason="data/citeseer missing")


# ---------------------------------------------------------------------------

def test_criterion_01_engine_gradients():
    start = time.perf_counter()
    worst = max(ad.gradient_check(op, seed).max_rel_error for op in ad.PRIMITIVES for seed in range(3))

    g = random_graph(12, 0.3, 0, classes=3, features=np.random.default_rng(0).random((12, 5)))
    train_nodes = np.arange(0, 12, 2)
    model = {}
    for arch in ("gcn", "sgc", "appnp", "gin"):
        spec = ModelSpec(arch, hidden_dim=6, dropout=0.0)
        ops = graph_ops(g, spec)
        fn = lambda *ws, spec=spec, ops=ops: ad.cross_entropy(forward(spec, ws, ops)[0], g.labels, train_nodes)
        ws = init_weights(spec, 5, 3, 1)
        model[arch] = ad.check_function(arch, fn, ws, tolerance=1e-5).max_rel_error
    ok = worst < 1e-6 and max(model.values()) < 1e-5
    detail = f"primitives max rel {worst:.1e} (<1e-6); models " + \
        ", ".join(f"{a} {e:.1e}" for a, e in model.items()) + " (<1e-5)"
    verdict(1, ok, detail, time.perf_counter() - start, 10)


def test_criterion_02_meta_gradient():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    g = random_graph(12, 0.3, 0, classes=3, features=rng.random((12, 5)))
    split = split_nodes(g, 0.4, 0.2, 0)
    problem = build_problem(g, split, MetaConfig(inner_epochs=30, model=ModelSpec(hidden_dim=8, dropout=0.0)), 0)
    adj = g.adjacency.toarray()
    analytic, _ = meta_gradient(problem, sp.csr_matrix(adj))
    h = 1e-5
    num = np.zeros_like(adj)
    for u, v in itertools.permutations(range(12), 2):
        plus, minus = adj.copy(), adj.copy()
        plus[u, v] += h
        minus[u, v] -= h
        num[u, v] = (attack_loss(problem, plus) - attack_loss(problem, minus)) / (2 * h)
    off = ~np.eye(12, dtype=bool)
    rel = float(ad.rel_error(analytic[off], num[off]))
    ok = rel < 1e-4 and np.abs(analytic).max() > 1e-6
    verdict(2, ok, f"GCN, 12 nodes, 30 inner epochs: max rel {rel:.1e} over 132 entries (<1e-4)",
            time.perf_counter() - start, 60)


def test_criterion_03_nettack_oracle():
    start = time.perf_counter()
    agree = 0
    for seed in range(100):
        g, s, target, budget = nettack_instance(seed)
        p = nettack(g, s, target, budget)
        adj = g.adjacency.toarray()
        used, ok = set(), True
        for f in p.flips:
            pairs = sorted(default_pairs(adj, g.num_nodes, target) - used)
            _, choice = oracle_choice(adj, g.features, s.weight, target, int(g.labels[target]), pairs)
            ok &= f.pair == choice
            adj[f.u, f.v] = adj[f.v, f.u] = 1 - adj[f.u, f.v]
            used.add(f.pair)
        agree += ok
    verdict(3, agree == 100, f"{agree}/100 graphs agree at every step", time.perf_counter() - start, 120)


@needs_cora
@pytest.mark.slow
def test_criterion_04_cora_clean_accuracy():
    start = time.perf_counter()
    g = load_graph_dir(DATA / "cora")
    acc = mean_test_accuracy(g, split_nodes(g, 0.1, 0.1, 0))
    verdict(4, abs(acc - 0.7352) <= 0.05, f"mean test accuracy {acc:.4f} (target 0.7352 +- 0.05)",
            time.perf_counter() - start, 300)


@needs_cora
@pytest.mark.slow
def test_criterion_05_cora_mettack_trend():
    start = time.perf_counter()
    g = load_graph_dir(DATA / "cora")
    split = split_nodes(g, 0.1, 0.1, 0)
    p, _ = cached_mettack("cora", g, split, 0.10)
    accs = rates_trend(g, split, p)
    ok = strictly_decreasing(accs) and accs[0] - accs[-1] >= 0.05
    verdict(5, ok, "accuracy at rates 0/0.05/0.10: " + " > ".join(f"{a:.4f}" for a in accs)
            + f", drop {accs[0] - accs[-1]:.4f} (>=0.05)", time.perf_counter() - start, 7200)


@pytest.mark.slow
def test_criterion_05_synthetic_fallback():
    start = time.perf_counter()
    g, _ = generate(SyntheticSpec(500, 5, 0.1, 6, seed=0))
    split = split_nodes(g, 0.1, 0.1, 0)
    accs = rates_trend(g, split, mettack(g, split, 0.10, seed=0))
    ok = strictly_decreasing(accs) and accs[0] - accs[-1] >= 0.05
    verdict("5s", ok, "500-node fallback, rates 0/0.05/0.10: " + " > ".join(f"{a:.4f}" for a in accs),
            time.perf_counter() - start, 600)


def test_criterion_06_regularity_trend():
    start = time.perf_counter()
    mus = (0.02, 0.04, 0.06, 0.08, 0.10)
    sigma = [float(np.mean([structural_regularity(generate(SyntheticSpec(500, 25, mu, 20, 3.0, s))[0], 0.1, s)
                            .sigma_c for s in SEEDS])) for mu in mus]
    verdict(6, strictly_decreasing(sigma), "mean sigma_c over mu 0.02..0.10: "
            + ", ".join(f"{x:.4f}" for x in sigma), time.perf_counter() - start, 300)


@pytest.mark.slow
def test_criterion_07_pattern_interaction():
    start = time.perf_counter()
    mus = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
    poisoned = []
    for mu in mus:
        accs = []
        for s in range(3):
            g, _ = generate(SyntheticSpec(500, 5, mu, 10, 0.0, s))
            split = split_nodes(g, 0.1, 0.1, s)
            pg = apply_perturbation(g, mettack(g, split, 0.10, seed=s))
            accs.append(accuracy(train(ModelSpec(), pg, split, TrainHyper(seed=s)), pg, split.test))
        poisoned.append(float(np.mean(accs)))
    ok = poisoned[0] < max(poisoned[1:])
    verdict(7, ok, "poisoned accuracy (Mettack 0.10) by mu: "
            + ", ".join(f"{mu:g}:{a:.4f}" for mu, a in zip(mus, poisoned)), time.perf_counter() - start, 1800)


@needs_cora
@pytest.mark.slow
def test_criterion_08_cora_profile_direction():
    start = time.perf_counter()
    g = load_graph_dir(DATA / "cora")
    p, attack_seconds = cached_mettack("cora", g, split_nodes(g, 0.1, 0.1, 0), 0.10)
    prof = edge_profile(g, p)
    expected = {m: (-1 if m == "C" else 1) for m in MEASURES}
    right = [m for m in MEASURES if prof.direction(m) == expected[m]]
    detail = f"{len(right)}/10 directions match (need 9); " + ", ".join(
        f"{m} {prof.clean_mean[m]:.4g}->{prof.perturbed_mean[m]:.4g}" for m in MEASURES)
    verdict(8, len(right) >= 9, detail, time.perf_counter() - start + attack_seconds, 1200)


def test_criterion_09_centrality_oracles():
    start = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(9)
    for seed in range(50):
        g = random_graph(int(rng.integers(2, 11)), float(rng.uniform(0.15, 0.8)), seed)
        bc, ebc, load = path_oracle(g)
        got_ebc, got_load = edge_measures(g, "EBC"), edge_measures(g, "ELC")
        worst = max([worst, float(np.abs(node_measures(g, "BC") - bc).max(initial=0.0))]
                    + [abs(got_ebc[e] - ebc[e]) for e in ebc] + [abs(got_load[e] - load[e]) for e in load])
    verdict(9, worst < 1e-9, f"max abs deviation {worst:.1e} on 50 graphs (<1e-9)", time.perf_counter() - start, 60)


def test_criterion_10_metric_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(10)
    atr_zero = all(atr(x, x) == 0.0 for x in rng.uniform(0.01, 1, 100))

    shift_dev = 0.0
    for _ in range(200):
        z = rng.normal(0, 10, (20, 5))
        y = rng.integers(0, 5, 20)
        shift_dev = max(shift_dev, float(np.abs(logit_margins(z + rng.normal(0, 50), y) - logit_margins(z, y)).max()))

    g, _ = generate(SyntheticSpec(80, 3, 0.1, 6, seed=1))
    split = split_nodes(g, 0.2, 0.2, 1)
    hyper = TrainHyper(epochs=40)
    tm = transfer_matrix({a: ModelSpec(a) for a in ("gcn", "sgc", "appnp")}, g, split,
                         {"method": "random", "rate": 0.2}, [0, 1], hyper)
    grid = robustness_landscape(ModelSpec(), g, split, [0.0, 0.1], [0.0, 0.1], 2, 5, hyper)
    clean = np.mean([decision_surface(train(ModelSpec(), g, split, TrainHyper(epochs=40, seed=s)), g,
                                      split.test).mean_margin for s in (5, 6)])
    origin = abs(grid.values[0, 0] - clean)
    ok = atr_zero and not np.diag(tm.atr).any() and shift_dev < 1e-9 and origin < 1e-12
    verdict(10, ok, f"ATR(x,x)=0 {atr_zero}; transfer diagonal {np.diag(tm.atr).tolist()}; "
            f"shift deviation {shift_dev:.1e}; landscape origin deviation {origin:.1e}",
            time.perf_counter() - start, 60)


@needs_citeseer
@pytest.mark.slow
def test_criterion_11_adversarial_training_trend():
    start = time.perf_counter()
    g = load_graph_dir(DATA / "citeseer")
    split = split_nodes(g, 0.1, 0.1, 0)
    poisoned = apply_perturbation(g, mettack(g, split, 0.05, seed=0))
    proportions = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)
    full = adversarial_perturbation(poisoned, max(proportions), 0, split)
    means = {}
    for prop in proportions:
        augmented = apply_perturbation(poisoned, full.truncate(budget_for(prop, poisoned.num_edges)))
        means[prop] = mean_test_accuracy(augmented, split, poisoned)
    peak = max(means.values())
    rises = max(means[0.04], means[0.06]) > means[0.0]
    falls = means[0.10] < peak
    verdict(11, rises and falls, "poisoned accuracy by augmentation proportion: "
            + ", ".join(f"{p:g}:{a:.4f}" for p, a in means.items()), time.perf_counter() - start, 3600)


DETERMINISM_SCRIPT = textwrap.dedent("""
    import hashlib, json, sys
    import numpy as np
    from graphre.attacks import mettack, nettack, random_attack, surrogate_fit, adversarial_perturbation
    from graphre.graph import split_nodes
    from graphre.metrics import neuron_sensitivity, robustness_landscape, transfer_matrix
    from graphre.models import ModelSpec, TrainHyper, predict_logits, train
    from graphre.structure import all_node_measures, edge_profile
    from graphre.synth import SyntheticSpec, generate, structural_regularity

    out = {}
    g, comm = generate(SyntheticSpec(120, 3, 0.1, 6, 2.5, seed=3))
    out["graph"] = [g.edges.tobytes(), g.features.tobytes(), comm.tobytes()]
    split = split_nodes(g, 0.1, 0.1, 3)
    out["split"] = [split.train.tobytes(), split.val.tobytes(), split.test.tobytes()]
    out["sigma"] = repr(structural_regularity(g, 0.1, 3).sigma_c)
    for arch in ("gcn", "sgc", "appnp", "gin"):
        m = train(ModelSpec(arch), g, split, TrainHyper(epochs=30, seed=1))
        out[arch] = [w.tobytes() for w in m.weights] + [predict_logits(m, g).tobytes()]
    attacks = {"random": random_attack(g, 0.1, 4),
               "mettack": mettack(g, split, 0.03, {"inner_epochs": 10}, 4),
               "augment": adversarial_perturbation(g, 0.03, 4, split, {"inner_epochs": 10}),
               "nettack": nettack(g, surrogate_fit(g, split), int(split.test[0]), 3)}
    for name, p in attacks.items():
        out[name] = json.dumps(p.to_dict(), sort_keys=True)
    prof = edge_profile(g, attacks["mettack"])
    out["profile"] = json.dumps(prof.to_dict(), sort_keys=True)
    out["measures"] = [v.tobytes() for v in all_node_measures(g).values()]
    out["landscape"] = robustness_landscape(ModelSpec(), g, split, [0.0, 0.1], [0.0, 0.1], 1, 2,
                                            TrainHyper(epochs=20)).values.tobytes()
    out["transfer"] = transfer_matrix({"gcn": ModelSpec(), "sgc": ModelSpec("sgc")}, g, split,
                                      {"method": "random", "rate": 0.1}, [0], TrainHyper(epochs=20)).atr.tobytes()
    m = train(ModelSpec(), g, split, TrainHyper(epochs=20))
    pg = __import__("graphre.attacks", fromlist=["apply_perturbation"]).apply_perturbation(g, attacks["random"])
    out["sensitivity"] = repr(neuron_sensitivity(m, [(g, pg)]).per_layer_sigma)
    for key in sorted(out):
        parts = out[key] if isinstance(out[key], list) else [out[key]]
        h = hashlib.sha256()
        for part in parts:
            h.update(part if isinstance(part, bytes) else part.encode())
        print(key, h.hexdigest())
""")

RUN_CONFIG = {"kind": "arch_grid", "seeds": [0, 1], "train": {"epochs": 20},
              "dataset": {"synthetic": {"num_nodes": 80, "num_communities": 3, "mu": 0.1, "avg_degree": 6}},
              "models": [{"architecture": "gcn"}, {"architecture": "appnp"}],
              "attacks": [{"method": "none"}, {"method": "mettack", "rate": 0.05, "meta": {"inner_epochs": 5}}]}


def _stage_digests(workdir):
    res = subprocess.run([sys.executable, "-c", DETERMINISM_SCRIPT], capture_output=True, text=True, check=True)
    digests = dict(line.split() for line in res.stdout.splitlines())
    cfg = workdir / "config.json"
    cfg.write_text(json.dumps(RUN_CONFIG))
    subprocess.run([sys.executable, "-m", "graphre.cli", "run", "--config", str(cfg), "--out",
                    str(workdir / "out")], capture_output=True, check=True)
    for sub in ("cells", "tables", "plots"):
        for path in sorted((workdir / "out" / sub).iterdir()):
            digests[f"run/{sub}/{path.name}"] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


def test_criterion_12_determinism(tmp_path):
    start = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, second = _stage_digests(tmp_path / "a"), _stage_digests(tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = not differing and first.keys() == second.keys()
    verdict(12, ok, f"{len(first)} stage outputs compared across two processes; differing: {differing or 'none'}",
            time.perf_counter() - start, 600)
