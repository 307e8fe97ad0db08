import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphre.errors import DivergenceError, ShapeError, ValidationError
from graphre.graph import Graph, NodeSplit, split_nodes
from graphre.models import (ARCHITECTURES, ModelSpec, TrainedModel, TrainHyper, accuracy, init_weights,
                            load_checkpoint, predict_logits, save_checkpoint, train, weight_shapes)
from graphre.synth import SyntheticSpec, generate

from conftest import random_graph


def all_nodes_split(n, train_nodes):
    rest = [i for i in range(n) if i not in set(train_nodes)]
    return NodeSplit.from_lists(train_nodes, rest[:2], rest[2:])


def logistic_regression_accuracy(x, y, steps=500, lr=0.5):
    """Plain softmax regression by gradient descent; the separability oracle."""
    c = y.max() + 1
    w = np.zeros((x.shape[1], c))
    onehot = np.eye(c)[y]
    for _ in range(steps):
        z = x @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= lr * x.T @ (p - onehot) / len(y)
    return float(np.mean(np.argmax(x @ w, 1) == y))


def test_two_cliques_gcn_fits_training_set(cliques):
    assert logistic_regression_accuracy(cliques.features, cliques.labels) == 1.0
    split = NodeSplit.from_lists(range(20), [], [])
    m = train(ModelSpec("gcn", 2), cliques, split, TrainHyper(seed=0))
    assert accuracy(m, cliques, split.train) == 1.0


def test_zero_epochs_keeps_initial_weights(cliques):
    split = all_nodes_split(20, [0, 10])
    spec = ModelSpec()
    m = train(spec, cliques, split, TrainHyper(epochs=0, seed=3))
    for w, w0 in zip(m.weights, init_weights(spec, 2, 2, 3)):
        assert np.array_equal(w, w0)
    assert m.train_meta["final_train_loss"] is None


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_training_is_bit_identical_per_seed(arch):
    g = random_graph(30, 0.2, 1, classes=3)
    split = split_nodes(g, 0.3, 0.2, 0)
    a = train(ModelSpec(arch), g, split, TrainHyper(epochs=20, seed=5))
    b = train(ModelSpec(arch), g, split, TrainHyper(epochs=20, seed=5))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
    assert a.loss_history == b.loss_history


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_weight_shapes_chain(arch):
    spec = ModelSpec(arch, num_layers=3, hidden_dim=8)
    shapes = weight_shapes(spec, 11, 4)
    assert shapes[0][0] == 11 and shapes[-1][1] == 4
    assert all(a[1] == b[0] for a, b in zip(shapes[:-1], shapes[1:]))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_weights_give_zero_logits(arch):
    g = random_graph(12, 0.3, 2)
    spec = ModelSpec(arch)
    weights = tuple(np.zeros(s) for s in weight_shapes(spec, g.num_features, g.num_classes))
    assert not predict_logits(TrainedModel(spec, weights), g).any()


def test_sgc_identity_weights_on_isolated_node():
    x = np.eye(4)
    g = Graph.build(4, [(0, 1), (1, 2)], x, [0, 1, 2, 3], 4)
    spec = ModelSpec("sgc", sgc_hops=2)
    logits = predict_logits(TrainedModel(spec, (np.eye(4),)), g)
    np.testing.assert_array_equal(logits[3], x[3])


@pytest.mark.parametrize("arch", ARCHITECTURES)
@given(seed=st.integers(0, 10_000))
def test_logits_are_permutation_equivariant(arch, seed):
    g = random_graph(10, 0.35, seed, classes=3)
    perm = np.random.default_rng(seed).permutation(10)
    inv = np.argsort(perm)
    # node i of g becomes node perm[i] of h
    h = Graph.build(10, perm[g.edges], g.features[inv], g.labels[inv], 3)
    spec = ModelSpec(arch)
    weights = tuple(init_weights(spec, g.num_features, 3, seed))
    m = TrainedModel(spec, weights)
    np.testing.assert_allclose(predict_logits(m, h)[perm], predict_logits(m, g), atol=1e-12)


@given(seed=st.integers(0, 10_000), hops=st.integers(1, 3))
def test_sgc_equals_linear_gcn_with_collapsed_weights(seed, hops):
    # nonnegative features and weights keep every relu in the identity regime
    rng = np.random.default_rng(seed)
    g = random_graph(9, 0.4, seed, features=rng.random((9, 5)))
    dims = [5] + [4] * (hops - 1) + [2]
    ws = [rng.random(shape) for shape in zip(dims[:-1], dims[1:])]
    gcn = TrainedModel(ModelSpec("gcn", num_layers=hops, hidden_dim=4), tuple(ws))
    collapsed = ws[0]
    for w in ws[1:]:
        collapsed = collapsed @ w
    sgc = TrainedModel(ModelSpec("sgc", sgc_hops=hops), (collapsed,))
    np.testing.assert_allclose(predict_logits(sgc, g), predict_logits(gcn, g), atol=1e-10)


def test_appnp_full_teleport_returns_mlp_output():
    g = random_graph(15, 0.3, 4, classes=3)
    spec = ModelSpec("appnp", teleport=1.0, prop_steps=10)
    weights = tuple(init_weights(spec, g.num_features, 3, 0))
    mlp = ModelSpec("appnp", teleport=1.0, prop_steps=0)
    assert np.array_equal(predict_logits(TrainedModel(spec, weights), g),
                          predict_logits(TrainedModel(mlp, weights), g))


def test_tied_logits_predict_class_zero():
    g = Graph.build(4, [], np.ones((4, 2)), [0, 1, 0, 2], 3)
    spec = ModelSpec("sgc", sgc_hops=0)
    m = TrainedModel(spec, (np.zeros((2, 3)),))
    assert accuracy(m, g, [0, 1, 2, 3]) == 0.5
    with pytest.raises(ValidationError):
        accuracy(m, g, [])


def test_feature_dimension_mismatch(cliques):
    m = TrainedModel(ModelSpec("sgc"), (np.zeros((3, 2)),))
    with pytest.raises(ShapeError):
        predict_logits(m, cliques)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_epoch():
    g = Graph.build(4, [(0, 1), (2, 3)], np.full((4, 2), 1e300), [0, 1, 0, 1], 2)
    with pytest.raises(DivergenceError) as info:
        train(ModelSpec("gcn", dropout=0.0), g, all_nodes_split(4, [0, 1]))
    assert info.value.epoch <= 1 and f"epoch {info.value.epoch}" in str(info.value)


@pytest.mark.parametrize("kwargs", [dict(architecture="gat"), dict(num_layers=5), dict(dropout=1.0),
                                    dict(teleport=0.0), dict(num_layers=2, hidden_dim=0)])
def test_invalid_model_specs(kwargs):
    with pytest.raises(ValidationError):
        ModelSpec(**kwargs)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_round_trip(tmp_path, arch):
    g = random_graph(20, 0.25, 3, classes=2)
    m = train(ModelSpec(arch), g, split_nodes(g, 0.3, 0.2, 0), TrainHyper(epochs=5))
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec and back.train_meta == m.train_meta
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, m.weights))
    (tmp_path / "bad.ckpt").write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad.ckpt")


def nonincreasing_fraction(arch, seed):
    g, _ = generate(SyntheticSpec(300, 4, 0.1, 8, seed=seed))
    m = train(ModelSpec(arch, dropout=0.0), g, split_nodes(g, 0.1, 0.1, seed), TrainHyper(seed=seed))
    return float(np.mean(np.diff(m.loss_history) <= 0))


@pytest.mark.parametrize("arch", [
    "gcn", "sgc", "appnp",
    pytest.param("gin", marks=pytest.mark.xfail(
        strict=True, reason="unnormalised sum aggregation drives the loss to ~1e-5 within 20 epochs; "
                            "momentum then overshoots by up to 4e-6 per epoch")),
])
def test_loss_is_mostly_nonincreasing(arch):
    assert all(nonincreasing_fraction(arch, s) >= 0.95 for s in range(3))
