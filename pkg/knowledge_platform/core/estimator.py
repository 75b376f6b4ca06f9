"""
Knowledgeability estimator: message-passing regressor and MLP baseline.

Both kinds share one network shape: each layer aggregates the previous
representation through a propagation matrix, then applies an affine map.
Hidden layers use ReLU, the last layer maps to a scalar squashed by the
logistic function. The gnn kind propagates with the mean over {v} ∪ N(v);
the mlp kind propagates with the identity and never looks at edges.
Training is full-batch gradient descent on MSE with hand-written
backpropagation.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import joblib
import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse

from .errors import DataError, GraphError, ShapeMismatchError, TrainingDivergedError
from .features import FeatureMatrix
from .graph import KnowledgeGraph, Triplet, quota
from .tables import EntityScoreTable

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class RegressorKind(str, Enum):
    GNN = "gnn"
    MLP = "mlp"


class TrainConfig(BaseModel):
    learning_rate: float = Field(default=0.5, gt=0)
    epochs: int = Field(default=300, ge=1)
    seed: int = 0
    hidden_dim: int = Field(default=64, ge=1)
    n_layers: int = Field(default=2, ge=1)
    weight_init_scale: float = Field(default=1.0, gt=0)


@dataclass
class RegressorModel:
    kind: RegressorKind
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_dim: int

    def __post_init__(self):
        self.kind = RegressorKind(self.kind)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatchError("model needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} does not fit bias {b.shape}")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeMismatchError(f"layer {i} input {w.shape[0]} does not chain")
        if self.weights[-1].shape[1] != 1:
            raise ShapeMismatchError("last layer must map to a scalar")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def copy(self) -> "RegressorModel":
        return RegressorModel(
            self.kind,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_dim,
        )


@dataclass
class TrainReport:
    kind: RegressorKind
    loss_curve: List[float]
    final_train_mse: float
    n_train: int

    def to_dict(self) -> Dict:
        return {
            "kind": RegressorKind(self.kind).value,
            "n_train": self.n_train,
            "epochs": len(self.loss_curve),
            "initial_mse": self.loss_curve[0],
            "final_train_mse": self.final_train_mse,
            "loss_curve": self.loss_curve,
        }


def propagation_matrix(g: KnowledgeGraph, kind: RegressorKind) -> sparse.csr_matrix:
    """Row-normalized mean over {v} ∪ N(v) for gnn; identity for mlp."""
    n = g.num_entities
    if RegressorKind(kind) == RegressorKind.MLP:
        return sparse.identity(n, format="csr")
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for v in range(n):
        group = sorted(set(g.neighbors(v)) | {v})
        weight = 1.0 / len(group)
        rows.extend([v] * len(group))
        cols.extend(group)
        vals.extend([weight] * len(group))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def init_model(kind: RegressorKind, input_dim: int, cfg: TrainConfig) -> RegressorModel:
    """Uniform(-s, s) weights with s = scale / sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(cfg.seed)
    dims = [input_dim] + [cfg.hidden_dim] * (cfg.n_layers - 1) + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = cfg.weight_init_scale / np.sqrt(fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RegressorModel(RegressorKind(kind), weights, biases, cfg.hidden_dim)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class _ForwardCache:
    aggregated: List[np.ndarray] = field(default_factory=list)  # P @ H_l
    pre_activations: List[np.ndarray] = field(default_factory=list)
    output: Optional[np.ndarray] = None


def _forward_pass(model: RegressorModel, propagation: sparse.spmatrix, x: np.ndarray) -> _ForwardCache:
    cache = _ForwardCache()
    h = x
    last = model.n_layers - 1
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = np.asarray(propagation @ h)
        z = a @ w + b
        cache.aggregated.append(a)
        cache.pre_activations.append(z)
        h = _sigmoid(z) if layer == last else np.maximum(z, 0.0)
    cache.output = h[:, 0]
    return cache


def _check_inputs(model: RegressorModel, g: KnowledgeGraph, features: FeatureMatrix) -> None:
    if len(features) != g.num_entities:
        raise ShapeMismatchError(
            f"feature matrix has {len(features)} rows for {g.num_entities} entities"
        )
    if features.dim != model.input_dim:
        raise ShapeMismatchError(f"feature dim {features.dim} does not match model input {model.input_dim}")


def predict_all(
    model: RegressorModel,
    g: KnowledgeGraph,
    features: FeatureMatrix,
    propagation: Optional[sparse.spmatrix] = None,
) -> np.ndarray:
    _check_inputs(model, g, features)
    if propagation is None:
        propagation = propagation_matrix(g, model.kind)
    return _forward_pass(model, propagation, features.rows).output


def forward(model: RegressorModel, g: KnowledgeGraph, features: FeatureMatrix) -> Dict[int, float]:
    """Predicted knowledgeability in (0, 1) for every entity."""
    return {v: float(p) for v, p in enumerate(predict_all(model, g, features))}


def _mse_and_gradients(
    model: RegressorModel,
    propagation: sparse.spmatrix,
    x: np.ndarray,
    train_ids: np.ndarray,
    targets: np.ndarray,
    with_gradients: bool = True,
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    cache = _forward_pass(model, propagation, x)
    residual = cache.output[train_ids] - targets
    loss = float(np.mean(residual ** 2))
    if not with_gradients:
        return loss, [], []

    n = x.shape[0]
    d_out = np.zeros(n)
    d_out[train_ids] = 2.0 * residual / len(train_ids)
    y = cache.output
    d_z = (d_out * y * (1.0 - y))[:, None]

    grad_w: List[np.ndarray] = [np.empty(0)] * model.n_layers
    grad_b: List[np.ndarray] = [np.empty(0)] * model.n_layers
    for layer in range(model.n_layers - 1, -1, -1):
        grad_w[layer] = cache.aggregated[layer].T @ d_z
        grad_b[layer] = d_z.sum(axis=0)
        if layer == 0:
            break
        d_h = np.asarray(propagation.T @ (d_z @ model.weights[layer].T))
        d_z = d_h * (cache.pre_activations[layer - 1] > 0.0)
    return loss, grad_w, grad_b


def _training_arrays(g: KnowledgeGraph, train_scores: Mapping[int, float]) -> Tuple[np.ndarray, np.ndarray]:
    if not train_scores:
        raise DataError("training set is empty")
    ids = np.array(sorted(train_scores), dtype=np.int64)
    if ids[0] < 0 or ids[-1] >= g.num_entities:
        raise GraphError("training set references an unknown entity")
    targets = np.array([train_scores[int(v)] for v in ids], dtype=float)
    if not np.all(np.isfinite(targets)):
        raise DataError("training targets must be finite")
    return ids, targets


def train(
    kind: RegressorKind,
    g: KnowledgeGraph,
    features: FeatureMatrix,
    train_scores: Mapping[int, float],
    cfg: TrainConfig,
) -> Tuple[RegressorModel, TrainReport]:
    """
    Fit the regressor to observed entity scores.

    Args:
        kind: gnn or mlp
        g: Knowledge graph providing the neighborhoods
        features: Entity feature matrix
        train_scores: Observed K(v) of the training entities
        cfg: Optimization settings

    Returns:
        Trained model and the per-epoch loss report
    """
    kind = RegressorKind(kind)
    ids, targets = _training_arrays(g, train_scores)
    model = init_model(kind, features.dim, cfg)
    _check_inputs(model, g, features)
    propagation = propagation_matrix(g, kind)
    x = features.rows

    loss_curve: List[float] = []
    for epoch in range(cfg.epochs):
        loss, grad_w, grad_b = _mse_and_gradients(model, propagation, x, ids, targets)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        loss_curve.append(loss)
        for layer in range(model.n_layers):
            model.weights[layer] -= cfg.learning_rate * grad_w[layer]
            model.biases[layer] -= cfg.learning_rate * grad_b[layer]

    final_loss, _, _ = _mse_and_gradients(model, propagation, x, ids, targets, with_gradients=False)
    if not np.isfinite(final_loss):
        raise TrainingDivergedError(cfg.epochs, final_loss)
    logger.info(
        f"Trained {kind.value} on {len(ids)} entities for {cfg.epochs} epochs: "
        f"mse {loss_curve[0]:.5f} -> {final_loss:.5f}"
    )
    return model, TrainReport(kind, loss_curve, final_loss, len(ids))


def predict(
    model: RegressorModel,
    g: KnowledgeGraph,
    features: FeatureMatrix,
    targets: Iterable[int],
) -> EntityScoreTable:
    """Estimated scores for ``targets``; support is 0 since nothing was observed."""
    targets = sorted(set(int(v) for v in targets))
    for v in targets:
        if not 0 <= v < g.num_entities:
            raise GraphError(f"invalid entity id {v}")
    if not targets:
        return EntityScoreTable(predicted=True)
    output = predict_all(model, g, features)
    return EntityScoreTable(
        scores={v: float(output[v]) for v in targets},
        support={v: 0 for v in targets},
        predicted=True,
    )


def mean_absolute_error(predicted: EntityScoreTable, observed: EntityScoreTable) -> float:
    common = sorted(set(predicted.scores) & set(observed.scores))
    if not common:
        raise DataError("no entity is both predicted and observed")
    return float(np.mean([abs(predicted.scores[v] - observed.scores[v]) for v in common]))


def sample_training_scores(
    observed: EntityScoreTable, fraction: float, seed: int, excluded: Iterable[int] = ()
) -> Dict[int, float]:
    """Observed scores of a seeded sample of ⌈fraction·n⌉ scored entities outside ``excluded``."""
    excluded_set = set(excluded)
    candidates = [v for v in sorted(observed.scores) if v not in excluded_set]
    size = min(len(candidates), quota(fraction, len(candidates)))
    if size < 1:
        raise DataError("no scored entities left to train on")
    rng = np.random.default_rng(seed)
    chosen = sorted(candidates[i] for i in rng.choice(len(candidates), size=size, replace=False))
    return {v: observed.scores[v] for v in chosen}


# -- persistence -------------------------------------------------------------

def save_model(model: RegressorModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(
        {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": model.kind.value,
            "hidden_dim": model.hidden_dim,
            "shapes": [list(w.shape) for w in model.weights],
            "weights": model.weights,
            "biases": model.biases,
        },
        path,
    )
    logger.info(f"Saved {model.kind.value} model to {path}")
    return path


def load_model(path: Path) -> RegressorModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    data = joblib.load(path)
    if not isinstance(data, dict) or data.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"{path.name} is not a format {MODEL_FORMAT_VERSION} model file")
    model = RegressorModel(
        RegressorKind(data["kind"]),
        [np.asarray(w, dtype=float) for w in data["weights"]],
        [np.asarray(b, dtype=float) for b in data["biases"]],
        int(data["hidden_dim"]),
    )
    if [list(w.shape) for w in model.weights] != data["shapes"]:
        raise ShapeMismatchError(f"{path.name}: stored shapes do not match the arrays")
    return model


# -- gradient verification -----------------------------------------------------

@dataclass
class TinyInstance:
    g: KnowledgeGraph
    features: FeatureMatrix
    targets: Dict[int, float]
    model: RegressorModel


def make_tiny_instance(
    kind: RegressorKind,
    seed: int = 0,
    n_nodes: int = 6,
    dim: int = 4,
    hidden_dim: int = 3,
    n_layers: int = 2,
    zero_loss: bool = False,
) -> TinyInstance:
    """
    Small random graph (a path plus a few chords) with random unit features.
    With ``zero_loss`` the targets equal the model's own predictions.
    """
    rng = np.random.default_rng(seed)
    triplets = [Triplet(i, 0, i + 1) for i in range(n_nodes - 1)]
    for _ in range(n_nodes // 2):
        head, tail = rng.choice(n_nodes, size=2, replace=False)
        triplets.append(Triplet(int(head), 0, int(tail)))
    g = KnowledgeGraph([f"n{i}" for i in range(n_nodes)], ["linked_to"], triplets)

    rows = rng.normal(size=(n_nodes, dim))
    features = FeatureMatrix(rows / np.linalg.norm(rows, axis=1, keepdims=True))
    cfg = TrainConfig(seed=seed, hidden_dim=hidden_dim, n_layers=n_layers)
    model = init_model(kind, dim, cfg)

    train_ids = sorted(int(v) for v in rng.choice(n_nodes, size=max(2, n_nodes // 2), replace=False))
    if zero_loss:
        output = predict_all(model, g, features)
        targets = {v: float(output[v]) for v in train_ids}
    else:
        targets = {v: float(rng.random()) for v in train_ids}
    return TinyInstance(g, features, targets, model)


def gradient_check(kind: RegressorKind, instance: TinyInstance, epsilon: float = 1e-5) -> float:
    """
    Worst relative error between analytic gradients and central differences,
    with relative error |a - n| / max(|a| + |n|, 1e-6).
    """
    model = instance.model.copy()
    if model.kind != RegressorKind(kind):
        raise DataError(f"instance model is {model.kind.value}, not {RegressorKind(kind).value}")
    propagation = propagation_matrix(instance.g, model.kind)
    x = instance.features.rows
    ids, targets = _training_arrays(instance.g, instance.targets)

    _, grad_w, grad_b = _mse_and_gradients(model, propagation, x, ids, targets)
    analytic: List[np.ndarray] = []
    for gw, gb in zip(grad_w, grad_b):
        analytic.extend([gw, gb])

    worst = 0.0
    for param, grad in zip(model.parameters(), analytic):
        for i in range(param.size):
            original = param.flat[i]
            param.flat[i] = original + epsilon
            loss_plus, _, _ = _mse_and_gradients(model, propagation, x, ids, targets, with_gradients=False)
            param.flat[i] = original - epsilon
            loss_minus, _, _ = _mse_and_gradients(model, propagation, x, ids, targets, with_gradients=False)
            param.flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            a = float(grad.flat[i])
            error = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
            worst = max(worst, error)
    logger.debug(f"Gradient check ({model.kind.value}): max relative error {worst:.3e}")
    return worst


def analytic_gradients(instance: TinyInstance) -> List[np.ndarray]:
    """Analytic gradients of the instance loss, ordered like ``parameters()``."""
    model = instance.model
    propagation = propagation_matrix(instance.g, model.kind)
    ids, targets = _training_arrays(instance.g, instance.targets)
    _, grad_w, grad_b = _mse_and_gradients(model, propagation, instance.features.rows, ids, targets)
    grads: List[np.ndarray] = []
    for gw, gb in zip(grad_w, grad_b):
        grads.extend([gw, gb])
    return grads
