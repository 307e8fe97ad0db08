"""GNN architectures (GCN, SGC, APPNP, GIN) and a deterministic full-batch trainer.

Models are functional: :func:`forward` maps a weight list and a
:class:`GraphOps` bundle to logits, so the same code path serves plain
training, evaluation and the unrolled inner loop of the meta-gradient attack.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import DivergenceError, ShapeError, ValidationError
from .graph import Graph, NodeSplit, normalized_adjacency

ARCHITECTURES = ("gcn", "sgc", "appnp", "gin")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 16
    dropout: float = 0.5
    sgc_hops: int = 2
    teleport: float = 0.1
    prop_steps: int = 10

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if not 1 <= self.num_layers <= 4:
            raise ValidationError(f"num_layers must be in 1..4, got {self.num_layers}")
        if self.num_layers >= 2 and self.hidden_dim < 1:
            raise ValidationError("hidden_dim must be >= 1 for multi-layer models")
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.sgc_hops < 0 or self.prop_steps < 0:
            raise ValidationError("sgc_hops and prop_steps must be non-negative")
        if not 0 < self.teleport <= 1:
            raise ValidationError(f"teleport must be in (0, 1], got {self.teleport}")

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 200
    seed: int = 0

    @classmethod
    def from_dict(cls, d) -> "TrainHyper":
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: ModelSpec
    weights: tuple
    train_meta: dict = field(default_factory=dict)
    loss_history: tuple = ()

    def __post_init__(self):
        for w in self.weights:
            w.setflags(write=False)

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.weights[-1].shape[1])


def weight_shapes(spec: ModelSpec, in_dim: int, num_classes: int) -> list:
    h = spec.hidden_dim
    if spec.architecture == "sgc":
        return [(in_dim, num_classes)]
    if spec.architecture in ("gcn", "appnp"):
        dims = [in_dim] + [h] * (spec.num_layers - 1) + [num_classes]
        return list(zip(dims[:-1], dims[1:]))
    # gin: every layer is a two-matrix MLP applied after sum aggregation
    dims = [in_dim] + [h] * (spec.num_layers - 1) + [num_classes]
    shapes = []
    for a, b in zip(dims[:-1], dims[1:]):
        shapes += [(a, h), (h, b)]
    return shapes


def init_weights(spec: ModelSpec, in_dim: int, num_classes: int, seed: int) -> list:
    """Glorot-uniform initialisation, deterministic in ``seed``."""
    rng = np.random.default_rng([seed, 0])
    out = []
    for fan_in, fan_out in weight_shapes(spec, in_dim, num_classes):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        out.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    return out


@dataclass
class GraphOps:
    """Propagation operators and input features for one graph."""

    features: ad.SparseOperator
    prop: ad.SparseOperator | None = None
    gin: ad.SparseOperator | None = None

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]


def sum_aggregator(adj) -> sp.csr_matrix:
    """``A + I``: neighbour sum plus the node itself (GIN with epsilon fixed at 0)."""
    return (sp.csr_matrix(adj, dtype=np.float64) + sp.identity(adj.shape[0], format="csr")).tocsr()


def graph_ops(g: Graph, spec: ModelSpec | None = None) -> GraphOps:
    arch = spec.architecture if spec else None
    ops = GraphOps(ad.SparseOperator(sp.csr_matrix(g.features)))
    if arch != "gin":
        ops.prop = ad.SparseOperator(normalized_adjacency(g))
    if arch in (None, "gin"):
        ops.gin = ad.SparseOperator(sum_aggregator(g.adjacency))
    return ops


def _drop_sparse(op: ad.SparseOperator, rate, rng, training) -> ad.SparseOperator:
    if not training or rate <= 0:
        return op
    m = op.matrix.copy()
    keep = 1.0 - rate
    m.data = m.data * ((rng.random(m.data.shape) < keep) / keep)
    return ad.SparseOperator(m)


def _project(x, w, rate, rng, training):
    """Dropout on the input, then ``x @ w`` (``x`` may be a sparse operator)."""
    if isinstance(x, ad.SparseOperator):
        return ad.spmm(_drop_sparse(x, rate, rng, training), w)
    return ad.matmul(ad.dropout(x, rate, rng, training), w)


def forward(spec: ModelSpec, weights, ops: GraphOps, training: bool = False, rng=None):
    """Return ``(logits, hidden)`` where ``hidden`` lists every layer output.

    Hidden entries are post-activation; the last entry is the logits tensor.
    """
    arch, p = spec.architecture, spec.dropout
    hidden = []
    if arch == "sgc":
        z = _project(ops.features, weights[0], p, rng, training)
        for _ in range(spec.sgc_hops):
            z = ad.spmm(ops.prop, z)
        return z, [z]
    if arch == "gcn":
        h = ops.features
        for i, w in enumerate(weights):
            h = ad.spmm(ops.prop, _project(h, w, p, rng, training))
            if i < len(weights) - 1:
                h = ad.relu(h)
            hidden.append(h)
        return h, hidden
    if arch == "appnp":
        h = ops.features
        for i, w in enumerate(weights):
            h = _project(h, w, p, rng, training)
            if i < len(weights) - 1:
                h = ad.relu(h)
                hidden.append(h)
        alpha = spec.teleport
        teleport = ad.scale(h, alpha)
        z = h
        for _ in range(spec.prop_steps):
            z = ad.add(ad.scale(ad.spmm(ops.prop, z), 1.0 - alpha), teleport)
        hidden.append(z)
        return z, hidden
    # gin
    h = ops.features
    n_layers = len(weights) // 2
    for i in range(n_layers):
        wa, wb = weights[2 * i], weights[2 * i + 1]
        if isinstance(h, ad.SparseOperator) and not ops.gin.requires_grad:
            h = ad.SparseOperator(ops.gin.matrix @ h.matrix)  # (A+I)X stays sparse
        elif isinstance(h, ad.SparseOperator):
            h = ad.spmm(ops.gin, ad.Tensor(h.matrix.toarray()))
        else:
            h = ad.spmm(ops.gin, h)
        h = ad.relu(_project(h, wa, p, rng, training))
        h = ad.matmul(h, wb)
        if i < n_layers - 1:
            h = ad.relu(h)
        hidden.append(h)
    return h, hidden


def _check_compatible(m: TrainedModel, g: Graph):
    if g.num_features != m.in_dim:
        raise ShapeError(f"model expects {m.in_dim} features, graph has {g.num_features}")


def _evaluate(m: TrainedModel, g: Graph):
    _check_compatible(m, g)
    ops = graph_ops(g, m.spec)
    with ad.no_grad():
        logits, hidden = forward(m.spec, [ad.Tensor(w) for w in m.weights], ops, training=False)
    return logits.value, [h.value for h in hidden]


def predict_logits(m: TrainedModel, g: Graph) -> np.ndarray:
    """Pre-softmax scores ``N x C`` with dropout disabled."""
    return _evaluate(m, g)[0]


def hidden_representations(m: TrainedModel, g: Graph) -> list:
    return _evaluate(m, g)[1]


def predict(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)  # argmax returns the first maximum, i.e. lowest class id


def logits_accuracy(logits: np.ndarray, labels: np.ndarray, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValidationError("accuracy needs a nonempty node set")
    return float(np.mean(predict(logits[nodes]) == labels[nodes]))


def accuracy(m: TrainedModel, g: Graph, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValidationError("accuracy needs a nonempty node set")
    return logits_accuracy(predict_logits(m, g), g.labels, nodes)


def train(spec: ModelSpec, g: Graph, split: NodeSplit, hyper: TrainHyper | None = None,
          init: list | None = None) -> TrainedModel:
    """Full-batch momentum gradient descent on the training cross-entropy.

    Weight decay is coupled (added to the gradient). ``init`` overrides the
    seeded initialisation, which is what the weight-delta comparison needs.
    """
    hyper = hyper or TrainHyper()
    weights = init_weights(spec, g.num_features, g.num_classes, hyper.seed) if init is None \
        else [np.array(w, dtype=np.float64) for w in init]
    ops = graph_ops(g, spec)
    drop_rng = np.random.default_rng([hyper.seed, 1])
    velocity = [np.zeros_like(w) for w in weights]
    history = []
    for epoch in range(hyper.epochs):
        params = [ad.Tensor(w, requires_grad=True) for w in weights]
        logits, _ = forward(spec, params, ops, training=True, rng=drop_rng)
        loss = ad.cross_entropy(logits, g.labels, split.train)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(epoch, value)
        history.append(value)
        grads = ad.grad(loss, params)
        for w, v, gr in zip(weights, velocity, grads):
            step = gr.value + hyper.weight_decay * w
            v *= hyper.momentum
            v += step
            w -= hyper.lr * v
    meta = {"epochs": hyper.epochs, "seed": hyper.seed,
            "final_train_loss": history[-1] if history else None}
    model = TrainedModel(spec, tuple(weights), meta, tuple(history))
    if len(split.val):
        meta["final_val_accuracy"] = accuracy(model, g, split.val)
    else:
        meta["final_val_accuracy"] = None
    return model


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"GRECKPT1"


def save_checkpoint(m: TrainedModel, path) -> None:
    header = {
        "spec": m.spec.to_dict(),
        "meta": m.train_meta,
        "shapes": [list(w.shape) for w in m.weights],
        "loss_history": list(m.loss_history),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(w, dtype="<f8").tobytes() for w in m.weights)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(blob)


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValidationError(f"{path}: not a graphre checkpoint")
    (length,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + length])
    offset = 16 + length
    weights = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        weights.append(arr)
        offset += 8 * count
    if offset != len(data):
        raise ValidationError(f"{path}: weight blob has {len(data) - offset} trailing bytes")
    return TrainedModel(ModelSpec.from_dict(header["spec"]), tuple(weights), header["meta"],
                        tuple(header.get("loss_history", ())))
