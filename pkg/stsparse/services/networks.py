"""
GCN and ST-SparseGCN models: forward passes, training, evaluation and
checkpoints.

Forward passes record on a Tape. Layer-1 always consumes the raw features
as a CsrMatrix through spmm; attention masks are applied only to hidden
activations.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from stsparse.errors import ContractError, DegenerateMaskError, DimensionError, TrainingFailure
from stsparse.models.config import Arch, ModelConfig, TrainConfig
from stsparse.models.graph import CsrMatrix, Graph
from stsparse.models.sparsity import DutyState, SparseConfig
from stsparse.models.trained import EpochRecord, TrainedModel
from stsparse.services import autodiff, sparsity
from stsparse.services.adapters import (
    model_config_from_dict,
    model_config_to_dict,
    train_config_from_dict,
    train_config_to_dict,
)
from stsparse.services.autodiff import AdamState, Tape, Value
from stsparse.services.graph_ops import Operator, propagation_operator

CHECKPOINT_FORMAT_VERSION = 1

WeightsLike = Sequence[Union[Value, np.ndarray]]


@dataclass
class ForwardResult:
    """Logits plus the hidden activations of each propagation layer."""

    logits: Value
    hidden: List[Value]

    def activation_ratio(self) -> float:
        """Largest activation ratio over the hidden layers."""
        if not self.hidden:
            return 0.0
        return max(sparsity.activation_ratio(h.data) for h in self.hidden)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_weights(config: ModelConfig, d: int, n_classes: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Seeded Glorot-uniform weights for every layer of the architecture."""
    shapes = TrainedModel.expected_shapes(config, d, n_classes)
    return [glorot(rng, fan_in, fan_out) for fan_in, fan_out in shapes]


def feature_matrix(g: Graph) -> CsrMatrix:
    return CsrMatrix.from_dense(g.features)


def _drop_features(x: CsrMatrix, p: float, rng: Optional[np.random.Generator], training: bool) -> CsrMatrix:
    """Inverted dropout on the stored entries of the sparse feature matrix."""
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    factor = (rng.random(x.nnz) >= p) / (1.0 - p)
    return CsrMatrix(x.n_rows, x.n_cols, x.row_ptr, x.col_idx, x.values * factor)


def _as_values(weights: WeightsLike) -> List[Value]:
    if weights and all(isinstance(w, Value) for w in weights):
        return list(weights)
    tape = Tape()
    return [w if isinstance(w, Value) else tape.constant(w) for w in weights]


def _check_input(g: Graph, weights: List[Value], n_classes: Optional[int] = None):
    if not weights:
        raise DimensionError("at least one weight matrix is required")
    if weights[0].shape[0] != g.d:
        raise DimensionError(f"first layer expects {weights[0].shape[0]} features, graph has {g.d}")
    for left, right in zip(weights[:-1], weights[1:]):
        if left.shape[1] != right.shape[0]:
            raise DimensionError(f"consecutive weights {left.shape} and {right.shape} do not chain")
    if n_classes is not None and weights[-1].shape[1] != n_classes:
        raise DimensionError("last layer width does not match the class count")


def gcn_pass(
    g: Graph,
    weights: WeightsLike,
    dropout_p: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    operator: Optional[Operator] = None,
    features: Optional[CsrMatrix] = None,
) -> ForwardResult:
    """GCN forward that also returns the ReLU activations of each hidden layer."""
    weights = _as_values(weights)
    _check_input(g, weights)
    op = propagation_operator(g) if operator is None else operator
    x = feature_matrix(g) if features is None else features

    hidden: List[Value] = []
    h: Optional[Value] = None
    for index, w in enumerate(weights):
        if index == 0:
            z = autodiff.spmm(_drop_features(x, dropout_p, rng, training), w)
        else:
            z = autodiff.matmul(autodiff.dropout(h, dropout_p, rng, training), w)
        z = autodiff.propagate(op, z)
        if index < len(weights) - 1:
            h = autodiff.relu(z)
            hidden.append(h)
    return ForwardResult(logits=z, hidden=hidden)


def gcn_forward(
    g: Graph,
    weights: WeightsLike,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Value:
    """
    Baseline GCN logits.

    Each layer computes A_norm H W with ReLU between layers; the last layer
    emits logits. Weights may be Values on a shared tape or plain arrays.
    """
    return gcn_pass(g, weights, dropout_p, training, rng).logits


def st_sparse_pass(
    g: Graph,
    weights: WeightsLike,
    duty_states: Sequence[DutyState],
    cfg: SparseConfig,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    operator: Optional[Operator] = None,
    features: Optional[CsrMatrix] = None,
) -> ForwardResult:
    """
    ST-SparseGCN forward returning the post-TopK activation of every sparse layer.

    The mask derived from duty_states[i] multiplies S^(i) where the next
    sparse layer consumes it; the classifier head sees the last activation
    unmasked.
    """
    weights = _as_values(weights)
    _check_input(g, weights)
    n_sparse = len(weights) - 1
    if n_sparse < 1:
        raise DimensionError("ST-SparseGCN needs at least one sparse layer and a head")
    if len(duty_states) != n_sparse:
        raise DimensionError(f"expected {n_sparse} duty states, got {len(duty_states)}")
    op = propagation_operator(g) if operator is None else operator
    x = feature_matrix(g) if features is None else features

    hidden: List[Value] = []
    s: Optional[Value] = None
    for index in range(n_sparse):
        w = weights[index]
        if index == 0:
            s = sparsity.st_layer_forward(op, _drop_features(x, dropout_p, rng, training), w, None, cfg)
        else:
            mask = sparsity.attention_mask(duty_states[index - 1], cfg.effective_gamma)
            s_in = autodiff.dropout(s, dropout_p, rng, training)
            s = sparsity.st_layer_forward(op, s_in, w, mask, cfg)
        hidden.append(s)

    logits = autodiff.matmul(s, weights[-1])
    return ForwardResult(logits=logits, hidden=hidden)


def st_sparse_forward(
    g: Graph,
    weights: WeightsLike,
    duty_states: Sequence[DutyState],
    cfg: SparseConfig,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Value:
    """ST-SparseGCN logits: sparse layers followed by a linear classifier head."""
    return st_sparse_pass(g, weights, duty_states, cfg, dropout_p, training, rng).logits


def model_pass(
    g: Graph,
    config: ModelConfig,
    weights: WeightsLike,
    duty: Sequence[DutyState],
    training: bool,
    rng: Optional[np.random.Generator],
    operator: Optional[Operator] = None,
    features: Optional[CsrMatrix] = None,
) -> ForwardResult:
    if config.arch == Arch.GCN:
        return gcn_pass(g, weights, config.effective_dropout, training, rng, operator, features)
    return st_sparse_pass(
        g, weights, duty, config.sparse, config.effective_dropout, training, rng, operator, features
    )


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked nodes whose argmax prediction equals the label."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateMaskError("accuracy mask selects no nodes")
    predictions = np.argmax(logits[mask], axis=1)
    return float(np.mean(predictions == labels[mask]))


def train(
    g: Graph,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    initial_weights: Optional[Sequence[np.ndarray]] = None,
) -> TrainedModel:
    """
    Full-batch training with Adam on the train-mask cross-entropy.

    For ST-SparseGCN the duty states are updated from each epoch's post-TopK
    activations after the optimizer step, so they shape the mask of the next
    epoch. Validation accuracy is recorded every epoch in eval mode; the
    best-validation weights are kept alongside the final ones.
    """
    if not g.train_mask.any():
        raise DegenerateMaskError("train mask selects no nodes")
    if not g.val_mask.any():
        raise DegenerateMaskError("validation mask selects no nodes")

    rng = np.random.default_rng(tcfg.seed)
    if initial_weights is None:
        weights = init_weights(mcfg, g.d, g.n_classes, rng)
    else:
        weights = [np.array(w, dtype=np.float64, copy=True) for w in initial_weights]
    expected = TrainedModel.expected_shapes(mcfg, g.d, g.n_classes)
    if [w.shape for w in weights] != expected:
        raise DimensionError(f"initial weight shapes do not match {expected}")

    optimizers = [
        AdamState.for_param(w, lr=tcfg.lr, weight_decay=tcfg.weight_decay if i == 0 else 0.0)
        for i, w in enumerate(weights)
    ]
    sparse = mcfg.arch == Arch.ST_SPARSE_GCN
    duty = [DutyState.initial(mcfg.sparse.d_h) for _ in range(mcfg.layers)] if sparse else []

    op = propagation_operator(g)
    features = feature_matrix(g)
    history: List[EpochRecord] = []
    best_val, best_epoch = -1.0, -1
    best_weights, best_duty = None, None
    stale = 0

    for epoch in range(1, tcfg.epochs + 1):
        tape = Tape()
        params = [tape.parameter(w) for w in weights]
        result = model_pass(g, mcfg, params, duty, True, rng, op, features)
        loss = autodiff.softmax_cross_entropy(result.logits, g.labels, g.train_mask)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value) or not np.all(np.isfinite(result.logits.data)):
            logging.error(f"Training diverged at epoch {epoch} (loss {loss_value})")
            raise TrainingFailure(epoch)

        tape.backward(loss)
        for param, state in zip(params, optimizers):
            autodiff.adam_step(param, state)

        if sparse:
            k = mcfg.sparse.k_alpha
            for layer_index, s in enumerate(result.hidden):
                if np.count_nonzero(s.data, axis=1).max(initial=0) > k:
                    raise ContractError(f"layer {layer_index} exceeded {k} active features per node")
            duty = [
                sparsity.update_duty(state, s.data, mcfg.sparse.effective_tau, mcfg.sparse.decay_rho)
                for state, s in zip(duty, result.hidden)
            ]

        train_acc = accuracy(result.logits.data, g.labels, g.train_mask)
        eval_logits = model_pass(g, mcfg, weights, duty, False, None, op, features).logits.data
        val_acc = accuracy(eval_logits, g.labels, g.val_mask)
        record = EpochRecord(
            epoch=epoch,
            loss=loss_value,
            train_acc=train_acc,
            val_acc=val_acc,
            activation_ratio=result.activation_ratio(),
        )
        history.append(record)

        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_weights = [w.copy() for w in weights]
            best_duty = [state.copy() for state in duty]
            stale = 0
        else:
            stale += 1

        if tcfg.log_every and epoch % tcfg.log_every == 0:
            logging.info(
                f"[{g.name or 'graph'}:{mcfg.arch.value}:seed={tcfg.seed}] epoch {epoch} "
                f"loss {loss_value:.4f} train {train_acc:.3f} val {val_acc:.3f} "
                f"active {record.activation_ratio:.3f}"
            )
        if tcfg.patience is not None and stale >= tcfg.patience:
            logging.info(f"Early stop at epoch {epoch}; best val {best_val:.3f} at epoch {best_epoch}")
            break

    if sparse:
        for layer_index, state in enumerate(duty):
            sparsity.log_duty_histogram(state, layer_index + 1)

    return TrainedModel(
        model_config=mcfg,
        train_config=tcfg,
        weights=weights,
        duty=duty,
        history=history,
        best_weights=best_weights,
        best_duty=best_duty,
        best_epoch=best_epoch,
        n_features=g.d,
        n_classes=g.n_classes,
    )


def predict(m: TrainedModel, g: Graph, use_best: bool = False) -> np.ndarray:
    """Eval-mode logits: dropout off, duty states frozen."""
    weights, duty = m.weights, m.duty
    if use_best and m.best_weights is not None:
        weights, duty = m.best_weights, m.best_duty or m.duty
    if g.d != m.n_features:
        raise DimensionError(f"model expects {m.n_features} features, graph has {g.d}")
    return model_pass(g, m.model_config, weights, duty, False, None).logits.data


def evaluate(m: TrainedModel, g: Graph, mask: np.ndarray, use_best: bool = False) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateMaskError("evaluation mask selects no nodes")
    return accuracy(predict(m, g, use_best), g.labels, mask)


def save_checkpoint(m: TrainedModel, path: Union[str, Path]) -> Path:
    """Write weights, duty vectors and configuration to a versioned .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"weight_{i}": w for i, w in enumerate(m.weights)}
    for i, state in enumerate(m.duty):
        arrays[f"duty_s_hat_{i}"] = state.s_hat
        arrays[f"duty_counts_{i}"] = state.counts
    for i, w in enumerate(m.best_weights or []):
        arrays[f"best_weight_{i}"] = w
    for i, state in enumerate(m.best_duty or []):
        arrays[f"best_duty_s_hat_{i}"] = state.s_hat
        arrays[f"best_duty_counts_{i}"] = state.counts
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model_config_to_dict(m.model_config),
        "train_config": train_config_to_dict(m.train_config),
        "seed": m.seed,
        "n_layers": len(m.weights),
        "duty_epochs": [state.epoch for state in m.duty],
        "best_epoch": m.best_epoch,
        "best_duty_epochs": [state.epoch for state in m.best_duty or []],
        "has_best": m.best_weights is not None,
        "n_features": m.n_features,
        "n_classes": m.n_classes,
        "history": [vars(record) for record in m.history],
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    logging.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> TrainedModel:
    path = Path(path)
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint format version {version} in {path}")
        n_layers = meta["n_layers"]
        weights = [archive[f"weight_{i}"].copy() for i in range(n_layers)]
        duty = [
            DutyState(archive[f"duty_s_hat_{i}"].copy(), archive[f"duty_counts_{i}"].copy(), epoch)
            for i, epoch in enumerate(meta["duty_epochs"])
        ]
        best_weights = None
        if meta["has_best"]:
            best_weights = [archive[f"best_weight_{i}"].copy() for i in range(n_layers)]
        best_duty = [
            DutyState(archive[f"best_duty_s_hat_{i}"].copy(), archive[f"best_duty_counts_{i}"].copy(), epoch)
            for i, epoch in enumerate(meta["best_duty_epochs"])
        ]

    return TrainedModel(
        model_config=model_config_from_dict(meta["model_config"]),
        train_config=train_config_from_dict(meta["train_config"]),
        weights=weights,
        duty=duty,
        history=[EpochRecord(**record) for record in meta["history"]],
        best_weights=best_weights,
        best_duty=best_duty if meta["has_best"] else None,
        best_epoch=meta["best_epoch"],
        n_features=meta["n_features"],
        n_classes=meta["n_classes"],
    )


def loss_gradient_check(
    g: Graph,
    mcfg: ModelConfig,
    seed: int = 0,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> autodiff.GradCheckReport:
    """
    Finite-difference check of the train-mask loss with respect to every weight.

    Runs in eval mode (no dropout) from a seeded initialization with the
    initial duty states, so the TopK selections are fixed around the point.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(mcfg, g.d, g.n_classes, rng)
    duty = []
    if mcfg.arch == Arch.ST_SPARSE_GCN:
        duty = [DutyState.initial(mcfg.sparse.d_h) for _ in range(mcfg.layers)]
    op = propagation_operator(g)
    features = feature_matrix(g)

    def loss(tape: Tape, values: Sequence[Value]) -> Value:
        logits = model_pass(g, mcfg, values, duty, False, None, op, features).logits
        return autodiff.softmax_cross_entropy(logits, g.labels, g.train_mask)

    report = autodiff.grad_check(loss, weights, h=h, tol=tol)
    logging.info(
        f"Gradient check {mcfg.arch.value} on {g.name or 'graph'}: "
        f"max relative error {report.max_rel_error:.2e} ({'ok' if report.passed else 'FAILED'})"
    )
    return report
