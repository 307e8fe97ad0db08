"""Converters from public citation-network dumps into :class:`~graphre.graph.Graph`.

Two raw formats are understood:

* LINQS ``<name>.content`` / ``<name>.cites`` (tab separated; Cora, Citeseer).
* Planetoid ``ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}`` pickles.

Both are reduced to their largest connected component, which is the
convention behind the 2,485-node Cora graph used in the robustness literature.
"""

from __future__ import annotations

import pickle
import sys
import zipfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, largest_connected_component


def load_linqs(content_path, cites_path, lcc: bool = True) -> Graph:
    ids, feats, names = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                continue
            ids.append(parts[0])
            feats.append(np.array(parts[1:-1], dtype=np.float64))
            names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names], dtype=np.int64)
    edges = []
    with open(cites_path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = index.get(parts[0]), index.get(parts[1])
            if a is not None and b is not None:
                edges.append((a, b))
    g = Graph.build(len(ids), edges, np.vstack(feats), labels, len(classes))
    return largest_connected_component(g) if lcc else g


def _unpickle(path):
    with open(path, "rb") as fh:
        if sys.version_info > (3, 0):
            return pickle.load(fh, encoding="latin1")
        return pickle.load(fh)  # pragma: no cover


def load_planetoid(directory, name, lcc: bool = True) -> Graph:
    d = Path(directory)
    objs = {k: _unpickle(d / f"ind.{name}.{k}") for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    test_idx = np.loadtxt(d / f"ind.{name}.test.index", dtype=np.int64)
    test_sorted = np.sort(test_idx)
    tx, ty = objs["tx"], objs["ty"]
    if name == "citeseer":
        # some citeseer test ids are isolated and missing from tx/ty
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((len(full), tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full), ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        ty = ty_ext
    features = sp.vstack((objs["allx"], tx)).tolil()
    features[test_idx, :] = features[test_sorted, :]
    onehot = np.vstack((objs["ally"], ty))
    onehot[test_idx, :] = onehot[test_sorted, :]
    n = features.shape[0]
    has_label = onehot.sum(axis=1) > 0
    labels = onehot.argmax(axis=1).astype(np.int64)
    edges = [(u, v) for u, nbrs in objs["graph"].items() for v in nbrs if u < n and v < n]
    g = Graph.build(n, edges, features.toarray(), labels, onehot.shape[1])
    if lcc:
        g = largest_connected_component(g)
        return g
    if not has_label.all():  # pragma: no cover
        raise ValueError("unlabelled nodes present; use lcc=True")
    return g


def extract_pgl_wheel(wheel, target_dir) -> Path:
    """Unpack the citation datasets bundled inside a ``pgl`` wheel."""
    target = Path(target_dir)
    with zipfile.ZipFile(wheel) as zf:
        for info in zf.infolist():
            if info.filename.startswith(("pgl/data/cora/", "pgl/data/citeseer/")):
                zf.extract(info, target)
    return target / "pgl" / "data"


def prepare(name, raw_dir) -> Graph:
    """Build the named dataset (``cora`` or ``citeseer``) from a raw directory."""
    raw = Path(raw_dir)
    if name == "cora":
        return load_linqs(raw / "cora" / "cora.content", raw / "cora" / "cora.cites")
    if name == "citeseer":
        if (raw / "citeseer" / "citeseer.content").exists():
            return load_linqs(raw / "citeseer" / "citeseer.content", raw / "citeseer" / "citeseer.cites")
        return load_planetoid(raw / "citeseer", "citeseer")
    raise ValueError(f"unknown dataset {name!r}")
