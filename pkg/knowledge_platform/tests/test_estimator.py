import numpy as np
import pytest

from knowledge_platform.core.errors import DataError, ShapeMismatchError, TrainingDivergedError
from knowledge_platform.core.estimator import (
    RegressorKind,
    RegressorModel,
    TrainConfig,
    analytic_gradients,
    forward,
    gradient_check,
    init_model,
    load_model,
    make_tiny_instance,
    mean_absolute_error,
    predict,
    predict_all,
    propagation_matrix,
    sample_training_scores,
    save_model,
    train,
)
from knowledge_platform.core.features import FeatureMatrix, FileProvider, HashedProvider, build_features
from knowledge_platform.core.graph import KnowledgeGraph, Triplet
from knowledge_platform.core.homophily import entity_knowledgeability
from knowledge_platform.core.planted import (
    PlantedOracleConfig,
    SyntheticDatasetConfig,
    generate_synthetic,
    planted_oracle,
)

from .conftest import make_graph, random_graph, scores_table


@pytest.fixture(scope="module")
def small_problem():
    g = random_graph(np.random.default_rng(0), 40, 90)
    features = build_features(g, HashedProvider(16))
    return g, features


def sigmoid(z: float) -> float:
    return 1.0 / (1.0 + np.exp(-z))


# -- forward ---------------------------------------------------------------

def test_mlp_identical_rows_identical_predictions():
    g = make_graph([(0, 1), (1, 2), (2, 3)])
    features = FeatureMatrix(np.tile([0.6, 0.8], (4, 1)))
    model = init_model(RegressorKind.MLP, 2, TrainConfig(hidden_dim=5))
    predictions = forward(model, g, features)
    assert len(set(predictions.values())) == 1


def test_zero_output_layer_gives_half(small_problem):
    g, features = small_problem
    model = init_model(RegressorKind.GNN, features.dim, TrainConfig(hidden_dim=8))
    model.weights[-1][:] = 0.0
    model.biases[-1][:] = 0.0
    assert set(forward(model, g, features).values()) == {0.5}


def test_single_layer_gnn_by_hand(path_graph):
    features = FeatureMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    model = RegressorModel(
        RegressorKind.GNN,
        weights=[np.array([[2.0], [-1.0]])],
        biases=[np.array([0.5])],
        hidden_dim=1,
    )
    predictions = forward(model, path_graph, features)
    # neighborhood means: (0.5, 0.5), (2/3, 1/3), (0.5, 0.5)
    assert predictions[0] == pytest.approx(sigmoid(1.0))
    assert predictions[1] == pytest.approx(sigmoid(1.5))
    assert predictions[2] == pytest.approx(sigmoid(1.0))


def test_single_layer_mlp_ignores_edges(path_graph):
    features = FeatureMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    model = RegressorModel(RegressorKind.MLP, [np.array([[2.0], [-1.0]])], [np.array([0.5])], 1)
    predictions = forward(model, path_graph, features)
    assert predictions[1] == pytest.approx(sigmoid(-0.5))
    assert predictions[0] == pytest.approx(sigmoid(2.5))


def test_propagation_rows_sum_to_one(small_problem):
    g, _ = small_problem
    matrix = propagation_matrix(g, RegressorKind.GNN)
    assert np.allclose(np.asarray(matrix.sum(axis=1)).ravel(), 1.0)
    assert propagation_matrix(g, RegressorKind.MLP).nnz == g.num_entities


def test_shape_mismatch(small_problem):
    g, features = small_problem
    model = init_model(RegressorKind.GNN, features.dim + 1, TrainConfig())
    with pytest.raises(ShapeMismatchError):
        forward(model, g, features)
    with pytest.raises(ShapeMismatchError):
        forward(init_model(RegressorKind.GNN, features.dim, TrainConfig()), make_graph([(0, 1)]), features)


def test_model_layers_must_chain():
    with pytest.raises(ShapeMismatchError):
        RegressorModel(RegressorKind.MLP, [np.ones((2, 3)), np.ones((2, 1))], [np.zeros(3), np.zeros(1)], 3)


def test_gnn_is_permutation_invariant(small_problem):
    g, features = small_problem
    model = init_model(RegressorKind.GNN, features.dim, TrainConfig(hidden_dim=8, seed=3))
    perm = np.random.default_rng(5).permutation(g.num_entities)
    relabeled = KnowledgeGraph(
        [f"e{i}" for i in range(g.num_entities)],
        g.relation_labels,
        [Triplet(int(perm[t.head]), t.relation, int(perm[t.tail])) for t in g.triplets],
    )
    rows = np.empty_like(features.rows)
    rows[perm] = features.rows
    original = predict_all(model, g, features)
    moved = predict_all(model, relabeled, FeatureMatrix(rows))
    assert np.allclose(moved[perm], original, rtol=0.0, atol=1e-12)


def test_default_mlp_ignores_edges(small_problem):
    g, features = small_problem
    model = init_model(RegressorKind.MLP, features.dim, TrainConfig())
    assert model.n_layers == 2
    rewired = random_graph(np.random.default_rng(9), g.num_entities, 30)
    empty = KnowledgeGraph(list(g.entity_labels), ["r0"], [])
    expected = predict_all(model, g, features)
    assert np.array_equal(predict_all(model, rewired, features), expected)
    assert np.array_equal(predict_all(model, empty, features), expected)


# -- training ----------------------------------------------------------------

def test_constant_targets_are_fit(small_problem):
    g, features = small_problem
    targets = {v: 0.7 for v in range(0, 40, 2)}
    for kind in RegressorKind:
        _, report = train(kind, g, features, targets, TrainConfig(hidden_dim=16))
        assert report.final_train_mse < 1e-3
        assert report.n_train == 20
        assert len(report.loss_curve) == 300


def test_training_is_deterministic(small_problem):
    g, features = small_problem
    targets = {v: float(v % 3) / 2 for v in range(30)}
    cfg = TrainConfig(epochs=50, hidden_dim=8, seed=4)
    first, _ = train(RegressorKind.GNN, g, features, targets, cfg)
    second, _ = train(RegressorKind.GNN, g, features, targets, cfg)
    for a, b in zip(first.parameters(), second.parameters()):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", list(RegressorKind))
def test_first_epoch_loss_is_fresh_model_mse(small_problem, kind):
    g, features = small_problem
    targets = {v: (v % 5) / 4 for v in range(0, 40, 3)}
    cfg = TrainConfig(epochs=5, hidden_dim=8, seed=2)
    _, report = train(kind, g, features, targets, cfg)

    output = predict_all(init_model(kind, features.dim, cfg), g, features)
    ids = sorted(targets)
    expected = np.mean([(output[v] - targets[v]) ** 2 for v in ids])
    assert report.loss_curve[0] == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("kind", list(RegressorKind))
@pytest.mark.parametrize("seed", range(5))
def test_small_steps_never_raise_the_loss(kind, seed):
    instance = make_tiny_instance(kind, seed=seed, n_nodes=10)
    cfg = TrainConfig(learning_rate=1e-3, epochs=30, seed=seed, hidden_dim=3)
    _, report = train(kind, instance.g, instance.features, instance.targets, cfg)
    curve = report.loss_curve + [report.final_train_mse]
    assert all(later <= earlier + 1e-12 for earlier, later in zip(curve, curve[1:]))


def test_training_sample_is_seeded_and_skips_excluded():
    observed = scores_table({v: v / 10 for v in range(10)})
    first = sample_training_scores(observed, 0.4, seed=1, excluded=[0, 1])
    assert len(first) == 4
    assert not set(first) & {0, 1}
    assert all(first[v] == v / 10 for v in first)
    assert sample_training_scores(observed, 0.4, seed=1, excluded=[0, 1]) == first
    with pytest.raises(DataError):
        sample_training_scores(observed, 0.5, seed=0, excluded=range(10))


def test_empty_training_set(small_problem):
    g, features = small_problem
    with pytest.raises(DataError):
        train(RegressorKind.MLP, g, features, {}, TrainConfig())


def test_divergence_reports_epoch(small_problem, monkeypatch):
    from knowledge_platform.core import estimator

    real = estimator._mse_and_gradients
    calls = []

    def blows_up_on_third_epoch(*args, **kwargs):
        loss, grad_w, grad_b = real(*args, **kwargs)
        calls.append(loss)
        return (float("nan") if len(calls) == 3 else loss), grad_w, grad_b

    monkeypatch.setattr(estimator, "_mse_and_gradients", blows_up_on_third_epoch)
    g, features = small_problem
    with pytest.raises(TrainingDivergedError) as exc_info:
        train(RegressorKind.MLP, g, features, {v: 0.5 for v in range(10)}, TrainConfig(epochs=5))
    assert exc_info.value.epoch == 2


def test_predict_matches_forward(small_problem):
    g, features = small_problem
    targets = {v: 0.2 for v in range(10)}
    model, _ = train(RegressorKind.GNN, g, features, targets, TrainConfig(epochs=20, hidden_dim=8))
    table = predict(model, g, features, targets)
    full = forward(model, g, features)
    assert table.predicted
    assert table.scores == {v: full[v] for v in targets}
    assert set(table.support.values()) == {0}


def test_predict_empty_targets(small_problem):
    g, features = small_problem
    model = init_model(RegressorKind.MLP, features.dim, TrainConfig())
    table = predict(model, g, features, [])
    assert len(table) == 0
    assert table.predicted


def test_save_and_load(tmp_path, small_problem):
    g, features = small_problem
    model, _ = train(RegressorKind.GNN, g, features, {v: 0.3 for v in range(8)}, TrainConfig(epochs=5, hidden_dim=4))
    path = save_model(model, tmp_path / "models" / "gnn.joblib")
    loaded = load_model(path)
    assert loaded.kind == RegressorKind.GNN
    assert forward(loaded, g, features) == forward(model, g, features)


def test_load_rejects_foreign_file(tmp_path):
    import joblib

    path = tmp_path / "other.joblib"
    joblib.dump({"weights": []}, path)
    with pytest.raises(DataError):
        load_model(path)


# -- gradient verification ---------------------------------------------------

@pytest.mark.parametrize("kind", list(RegressorKind))
def test_gradient_check(kind):
    instance = make_tiny_instance(kind, seed=1)
    assert gradient_check(kind, instance, epsilon=1e-5) < 1e-4


@pytest.mark.parametrize("kind", list(RegressorKind))
def test_gradient_check_three_layers(kind):
    instance = make_tiny_instance(kind, seed=2, n_layers=3)
    assert gradient_check(kind, instance) < 1e-4


@pytest.mark.parametrize("kind", list(RegressorKind))
def test_zero_loss_gradients_vanish(kind):
    instance = make_tiny_instance(kind, seed=3, zero_loss=True)
    for grad in analytic_gradients(instance):
        assert np.all(np.abs(grad) < 1e-8)


def test_gradient_check_kind_mismatch():
    instance = make_tiny_instance(RegressorKind.GNN)
    with pytest.raises(DataError):
        gradient_check(RegressorKind.MLP, instance)


# -- message passing advantage -----------------------------------------------

@pytest.mark.slow
def test_gnn_beats_mlp_on_planted_graph():
    gnn_errors, mlp_errors = [], []
    for seed in range(5):
        dataset = generate_synthetic(SyntheticDatasetConfig(n_entities=1000, seed=seed))
        g = dataset.graph
        oracle = planted_oracle(g, PlantedOracleConfig(community_rates=[0.9, 0.1], noise=0.0, seed=seed))
        scores = entity_knowledgeability(g, oracle.label(g, range(g.num_triplets)).labels)
        features = build_features(g, FileProvider.from_mapping(dataset.embeddings))

        rng = np.random.default_rng(seed)
        entities = sorted(scores.scores)
        train_ids = set(rng.choice(entities, size=int(0.3 * len(entities)), replace=False).tolist())
        train_scores = {v: scores.scores[v] for v in train_ids}
        heldout = scores.restricted(v for v in entities if v not in train_ids)

        cfg = TrainConfig(seed=seed)
        for kind, errors in ((RegressorKind.GNN, gnn_errors), (RegressorKind.MLP, mlp_errors)):
            model, _ = train(kind, g, features, train_scores, cfg)
            errors.append(mean_absolute_error(predict(model, g, features, heldout.scores), heldout))
    assert np.mean(gnn_errors) < np.mean(mlp_errors)
