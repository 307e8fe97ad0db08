import csv
import json

import numpy as np
import pytest

from graphre.errors import ConfigError, ValidationError
from graphre.runner import (PLOT_SCHEMAS, RunReport, emit_plot_data, load_config, parse_config, run_experiment,
                            validate_config)

from conftest import ROOT

SYNTH = {"synthetic": {"num_nodes": 60, "num_communities": 3, "avg_degree": 6}}
FAST = {"epochs": 20}
META = {"inner_epochs": 5}


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def errors_for(raw):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    return info.value.errors


def test_valid_minimal_config(tmp_path):
    assert validate_config(write_config(tmp_path, {"kind": "arch_grid", "dataset": SYNTH, "seeds": [0]})) == []


def test_empty_seeds_rejected():
    assert "/seeds: seeds must be nonempty" in errors_for({"kind": "arch_grid", "dataset": SYNTH, "seeds": []})


def test_unknown_architecture_names_the_field():
    errs = errors_for({"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "models": [{"architecture": "gat"}]})
    assert any(e.startswith("/models/0/architecture") for e in errs)


@pytest.mark.parametrize("raw,pointer", [
    ({"kind": "nope", "dataset": SYNTH, "seeds": [0]}, "/kind"),
    ({"kind": "arch_grid", "seeds": [0]}, "/dataset"),
    ({"kind": "arch_grid", "dataset": {"path": "/does/not/exist"}, "seeds": [0]}, "/dataset"),
    ({"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "attacks": [{"method": "mettack", "rate": -1}]},
     "/attacks/0"),
    ({"kind": "arch_grid", "dataset": SYNTH, "seeds": [0, 0]}, "/seeds"),
    ({"kind": "transfer", "dataset": SYNTH, "seeds": [0], "attacks": [{"method": "random", "rate": 0.1}]},
     "/models"),
    ({"kind": "landscape", "dataset": SYNTH, "seeds": [0], "params": {"alphas": [0.1]}}, "/params/alphas"),
    ({"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "bogus": 1}, "/bogus"),
])
def test_violations_carry_json_pointers(raw, pointer):
    assert any(e.startswith(pointer) for e in errors_for(raw))


def test_validation_has_no_side_effects(tmp_path):
    path = write_config(tmp_path, {"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "output_dir": "out"})
    validate_config(path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json"]


def test_digest_tracks_semantic_fields_only():
    base = {"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "train": FAST}
    a = parse_config(base)
    assert parse_config({**base, "output_dir": "elsewhere"}).digest == a.digest
    assert parse_config(json.loads(json.dumps(base, sort_keys=True))).digest == a.digest
    assert parse_config({**base, "seeds": [1]}).digest != a.digest
    assert parse_config({**base, "train": {"epochs": 21}}).digest != a.digest


def test_single_cell_arch_grid(tmp_path):
    cfg = parse_config({"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "train": FAST})
    report = run_experiment(cfg, tmp_path / "out")
    assert report.ok and len(report.cells) == 1
    cell = report.cells[0]
    assert cell.key == {"model": "gcn", "attack": "clean", "ptb_rate": 0.0}
    assert 0.0 <= cell.mean()["accuracy"] <= 1.0
    assert (tmp_path / "out" / "report.json").exists()
    assert RunReport.load(tmp_path / "out" / "report.json").cells[0].values == cell.values


def test_rerun_is_byte_identical(tmp_path):
    raw = {"kind": "arch_grid", "dataset": SYNTH, "seeds": [0, 1], "train": FAST,
           "models": [{"architecture": "gcn"}, {"architecture": "sgc"}],
           "attacks": [{"method": "none"}, {"method": "random", "rate": 0.1},
                       {"method": "mettack", "rate": 0.05, "meta": META}]}
    a = run_experiment(parse_config(raw), tmp_path / "a")
    b = run_experiment(parse_config(raw), tmp_path / "b")
    assert [c.to_dict() for c in a.cells] == [c.to_dict() for c in b.cells]
    for sub in ("cells/000.json", "cells/005.json", "tables/arch_grid.csv", "plots/arch_grid.csv"):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()


def test_means_recompute_from_per_seed_values(tmp_path):
    raw = {"kind": "decision_surface", "dataset": SYNTH, "seeds": [0, 1, 2], "train": FAST,
           "attacks": [{"method": "none"}, {"method": "random", "rate": 0.1}]}
    report = run_experiment(parse_config(raw), tmp_path)
    for path in sorted((tmp_path / "cells").glob("*.json")):
        d = json.loads(path.read_text())
        for metric, values in d["values"].items():
            assert len(values) == 3
            assert d["mean"][metric] == pytest.approx(np.mean(values), abs=1e-15)
            assert d["std"][metric] == pytest.approx(np.std(values), abs=1e-15)
    rows = read_csv(tmp_path / "plots" / "decision_surface.csv")
    assert tuple(rows[0]) == PLOT_SCHEMAS["decision_surface"] == ("model", "ptb_rate", "mean_margin")
    assert len(rows) == 1 + len(report.cells)


def test_pattern_grid_table_shape(tmp_path):
    raw = {"kind": "pattern_grid", "dataset": SYNTH, "seeds": [0], "train": FAST,
           "attacks": [{"method": "none"}, {"method": "mettack", "rate": 0.05, "meta": META}],
           "params": {"mus": [0.0, 0.1, 0.2]}}
    run_experiment(parse_config(raw), tmp_path)
    rows = read_csv(tmp_path / "tables" / "pattern_grid.csv")
    assert rows[0] == ["model", "attack", "mu=0", "mu=0.1", "mu=0.2"]
    assert [r[1] for r in rows[1:]] == ["clean", "mettack(0.05)"]


def test_transfer_plot_is_square_atr(tmp_path):
    raw = {"kind": "transfer", "dataset": SYNTH, "seeds": [0], "train": FAST,
           "models": [{"architecture": "gcn"}, {"architecture": "sgc"}, {"architecture": "appnp"}],
           "attacks": [{"method": "mettack", "rate": 0.05, "meta": META}]}
    run_experiment(parse_config(raw), tmp_path)
    rows = read_csv(tmp_path / "plots" / "transfer.csv")
    assert rows[0] == ["source\\target", "gcn", "sgc", "appnp"]
    assert all(len(r) == 4 for r in rows) and len(rows) == 4
    assert [float(rows[i][i]) for i in range(1, 4)] == [0.0, 0.0, 0.0]


def test_capacity_plot_schema(tmp_path):
    raw = {"kind": "capacity", "dataset": SYNTH, "seeds": [0], "train": FAST,
           "attacks": [{"method": "random", "rate": 0.05}], "params": {"layers": [2, 3], "train_fracs": [0.1, 0.2]}}
    run_experiment(parse_config(raw), tmp_path)
    rows = read_csv(tmp_path / "plots" / "capacity.csv")
    assert rows[0] == ["layers", "train_frac", "dataset", "accuracy"]
    assert [r[:2] for r in rows[1:]] == [["2", "0.1"], ["3", "0.2"]]


def test_failed_cells_are_recorded_and_block_plots(tmp_path):
    # a 10% split of 12 nodes in 3 classes leaves a class without training nodes
    raw = {"kind": "arch_grid", "seeds": [0], "train": FAST,
           "dataset": {"synthetic": {"num_nodes": 12, "num_communities": 3, "avg_degree": 2}}}
    report = run_experiment(parse_config(raw), tmp_path)
    assert not report.ok and report.failed_cells[0].errors
    assert read_csv(tmp_path / "tables" / "arch_grid.csv")[1][1] == "failed"
    assert not (tmp_path / "plots" / "arch_grid.csv").exists()
    with pytest.raises(ValidationError):
        emit_plot_data(report, "arch_grid", tmp_path / "plots")


def test_emit_plot_data_rejects_kind_mismatch(tmp_path):
    report = run_experiment(parse_config({"kind": "arch_grid", "dataset": SYNTH, "seeds": [0], "train": FAST}),
                            tmp_path)
    with pytest.raises(ValidationError):
        emit_plot_data(report, "capacity", tmp_path)


def test_load_config_resolves_relative_paths(tmp_path):
    from graphre.graph import save_graph
    from graphre.synth import SyntheticSpec, generate

    save_graph(generate(SyntheticSpec(30, 2, 0.1, 4))[0], tmp_path / "toy")
    cfg = load_config(write_config(tmp_path, {"kind": "arch_grid", "dataset": {"path": "toy"}, "seeds": [0]}))
    assert cfg.kind == "arch_grid"


@pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    assert validate_config(path) == []
