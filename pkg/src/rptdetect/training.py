"""Semi-supervised training: PSR-controlled splits, Adam, metrics, sweeps.

All randomness flows from the config seed; two runs with identical inputs
produce bit-identical parameter trajectories and metric values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    DivergedLoss,
    EmptyTestSet,
    InsufficientSamples,
    SingleClass,
)
from .hetgraph import HetGraph, labels_to_indices
from .matcher import NeighborIndex
from .model import ForwardResult, ModelConfig, ModelParams, forward, init_params

PSR_GRID = (0.5, 0.4, 0.3, 0.2, 0.1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    weight_decay: float = 0.0005
    batch_size: int = 256
    epochs: int = 100
    heads: int = 2
    embed_dim: int = 16
    proj_dim: int = 16
    seed: int = 0
    psr: float = 0.5
    test_fraction: float = 0.2
    ablation: tuple[str, ...] = ()
    eval_mode: str = "downstream"  # or "direct"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.psr <= 1.0):
            raise ValueError(f"psr must be in (0, 1], got {self.psr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_mode not in ("downstream", "direct"):
            raise ValueError(f"eval_mode must be 'downstream' or 'direct', got {self.eval_mode!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(proj_dim=self.proj_dim, embed_dim=self.embed_dim,
                           heads=self.heads, ablation=self.ablation)


@dataclass
class Metrics:
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int
    loss_history: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)


def metrics_from_predictions(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    """F1 = 2PR/(P+R), defined as 0 when P+R = 0; accuracy = correct/total."""
    if len(y_true) == 0:
        raise EmptyTestSet("no samples to evaluate")
    if len(y_true) != len(y_pred):
        raise ValueError("prediction/label length mismatch")
    tp = fp = fn = tn = 0
    for y, p in zip(y_true, y_pred):
        if p == 1 and y == 1:
            tp += 1
        elif p == 1 and y == 0:
            fp += 1
        elif p == 0 and y == 1:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    acc = (tp + tn) / len(y_true)
    return Metrics(f1, acc, tp, fp, fn, tn)


# --- splits ------------------------------------------------------------------

def split_dataset(labels: dict[str, int], psr: float, test_fraction: float,
                  seed: int) -> tuple[list[str], list[str]]:
    """Stratified test split, then a train set whose positive fraction is psr.

    The test set keeps the natural class composition; the train set is the
    largest subset of the remaining pool whose positive fraction equals psr
    within one sample.  Deterministic per seed.
    """
    if not (0.0 < psr <= 1.0):
        raise ValueError(f"psr must be in (0, 1], got {psr}")
    if not (0.0 <= test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    pos = sorted(k for k, y in labels.items() if y == 1)
    neg = sorted(k for k, y in labels.items() if y == 0)
    rng.shuffle(pos)
    rng.shuffle(neg)
    n_test_pos = round(test_fraction * len(pos))
    n_test_neg = round(test_fraction * len(neg))
    test = pos[:n_test_pos] + neg[:n_test_neg]
    pool_pos = pos[n_test_pos:]
    pool_neg = neg[n_test_neg:]
    if psr == 1.0:
        n_pos, n_neg = len(pool_pos), 0
    else:
        n_pos = min(len(pool_pos), round(len(pool_neg) * psr / (1.0 - psr)))
        n_neg = min(len(pool_neg), round(n_pos * (1.0 - psr) / psr)) if n_pos else 0
    if n_pos < 1 or (psr < 1.0 and n_neg < 1):
        raise InsufficientSamples(
            f"cannot build a train set with psr={psr} from "
            f"{len(pool_pos)} positives / {len(pool_neg)} negatives")
    got = n_pos / (n_pos + n_neg)
    if abs(got - psr) * (n_pos + n_neg) > 1.0 + 1e-9:
        raise InsufficientSamples(
            f"psr={psr} not reachable within one sample "
            f"(best {got:.4f} with {n_pos}+{n_neg})")
    train = pool_pos[:n_pos] + pool_neg[:n_neg]
    return sorted(train), sorted(test)


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        t=0,
        m={k: np.zeros_like(a) for k, a in params.arrays.items()},
        v={k: np.zeros_like(a) for k, a in params.arrays.items()},
    )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> ModelParams:
    """Bias-corrected Adam with additive L2 weight decay folded into gradients."""
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params.arrays:
        g = grads[name] + config.weight_decay * params.arrays[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params.arrays[name] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return params


# --- downstream linear classifier ------------------------------------------------

@dataclass
class LinearClassifier:
    w: np.ndarray
    b: float
    mean: np.ndarray
    std: np.ndarray

    def decision(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) / self.std) @ self.w + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision(X) >= 0).astype(int)


def train_downstream_classifier(X: np.ndarray, y: Sequence[int], seed: int = 0, *,
                                iters: int = 300, reg: float = 1e-3,
                                lr0: float = 0.5,
                                class_weight: str | None = None) -> LinearClassifier:
    """Linear max-margin classifier: L2-regularized hinge loss minimized by
    deterministic full-batch subgradient descent with a fixed iteration budget.

    ``class_weight="balanced"`` scales each hinge term inversely to its class
    frequency; the evaluation pipeline uses it so skewed positive ratios keep
    the separator meaningful.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    classes = set(y.tolist())
    if classes != {0, 1}:
        raise SingleClass(f"need both classes present, got {sorted(classes)}")
    if class_weight not in (None, "balanced"):
        raise ValueError(f"class_weight must be None or 'balanced', got {class_weight!r}")
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), 1e-8)
    Xs = (X - mean) / std
    s = 2.0 * y - 1.0
    n = len(y)
    if class_weight == "balanced":
        n_pos = int(y.sum())
        weight = np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        weight = np.ones(n)
    rng = np.random.default_rng(seed)
    w = rng.uniform(-0.01, 0.01, size=X.shape[1])
    b = 0.0
    for t in range(1, iters + 1):
        margins = s * (Xs @ w + b)
        viol = margins < 1.0
        sw = s[viol] * weight[viol]
        gw = reg * w - (sw[:, None] * Xs[viol]).sum(axis=0) / n
        gb = -float(sw.sum()) / n
        lr = lr0 / math.sqrt(t)
        w = w - lr * gw
        b = b - lr * gb
    return LinearClassifier(w, b, mean, std)


# --- evaluation -------------------------------------------------------------------

def evaluate(predictions, labels: dict[str, int], mode: str, *,
             train_embeddings: dict[str, np.ndarray] | None = None,
             train_labels: dict[str, int] | None = None, seed: int = 0) -> Metrics:
    """Score a test set either from probabilities or through the linear classifier.

    direct:     ``predictions`` maps test id -> probability, thresholded at 0.5.
    downstream: ``predictions`` maps test id -> embedding; a linear classifier is
                fit on (train_embeddings, train_labels) and applied to the test set.
    """
    ids = sorted(labels)
    if not ids:
        raise EmptyTestSet("no labeled samples in the test set")
    y_true = [labels[i] for i in ids]
    if mode == "direct":
        y_pred = [1 if predictions[i] >= 0.5 else 0 for i in ids]
    elif mode == "downstream":
        if train_embeddings is None or train_labels is None:
            raise ValueError("downstream mode needs train embeddings and labels")
        train_ids = sorted(train_labels)
        clf = train_downstream_classifier(
            np.stack([train_embeddings[i] for i in train_ids]),
            [train_labels[i] for i in train_ids], seed, class_weight="balanced")
        y_pred = clf.predict(np.stack([predictions[i] for i in ids])).tolist()
    else:
        raise ValueError(f"unknown eval mode {mode!r}")
    return metrics_from_predictions(y_true, y_pred)


# --- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    metrics: Metrics
    trend: list[tuple[int, str, float | None]]
    train_ids: list[str]
    test_ids: list[str]
    embeddings: dict[str, np.ndarray]
    probabilities: dict[str, float]


def _epoch_batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size].tolist()


def _run_epoch(graph: HetGraph, index: NeighborIndex, train_idx: list[int],
               labels_idx: dict[int, int], params: ModelParams, mc: ModelConfig,
               state: AdamState, config: TrainConfig, rng: np.random.Generator
               ) -> tuple[float, dict[str, float], dict[str, int]]:
    order = np.array(train_idx)
    rng.shuffle(order)
    total = 0.0
    count = 0
    beta_sum: dict[str, float] = {pid: 0.0 for pid in index.pattern_ids}
    beta_n: dict[str, int] = {pid: 0 for pid in index.pattern_ids}
    for batch in _epoch_batches(order, config.batch_size):
        res = forward(graph, index, batch, params, mc, labels=labels_idx)
        if not math.isfinite(res.loss):
            raise DivergedLoss(f"loss became {res.loss} during training")
        grads = res.tape.backward(res.loss_tensor)
        adam_step(params, grads, state, config)
        total += res.loss * len(batch)
        count += len(batch)
        for node_betas in res.beta.values():
            for pid, b in node_betas.items():
                beta_sum[pid] += b
                beta_n[pid] += 1
    return total / count, beta_sum, beta_n


def _embed_all(graph: HetGraph, index: NeighborIndex, node_idx: list[int],
               params: ModelParams, mc: ModelConfig, batch_size: int
               ) -> ForwardResult:
    z: dict[int, np.ndarray] = {}
    p: dict[int, float] = {}
    for start in range(0, len(node_idx), batch_size):
        res = forward(graph, index, node_idx[start:start + batch_size], params, mc)
        z.update(res.z)
        p.update(res.p)
    return ForwardResult(node_idx, None, p, z, {}, {}, set())


def train(graph: HetGraph, index: NeighborIndex, labels: dict[str, int],
          config: TrainConfig) -> TrainResult:
    """Full semi-supervised run: split, epochs of Adam, final evaluation.

    Returns final parameters, test metrics under ``config.eval_mode``, and the
    per-epoch mean pattern-attention trend.
    """
    train_ids, test_ids = split_dataset(labels, config.psr, config.test_fraction,
                                        config.seed)
    train_y = {i: labels[i] for i in train_ids}
    if len(set(train_y.values())) < 2:
        raise InsufficientSamples("train split needs at least one node per class")
    labels_idx = labels_to_indices(graph, labels)
    train_idx = [graph.index[i] for i in train_ids]
    test_idx = [graph.index[i] for i in test_ids]

    mc = config.model_config()
    params = init_params(graph.schema, index.patterns, mc, config.seed)
    state = init_adam_state(params)
    rng = np.random.default_rng(config.seed)

    loss_history: list[float] = []
    epoch_seconds: list[float] = []
    trend: list[tuple[int, str, float | None]] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        mean_loss, beta_sum, beta_n = _run_epoch(
            graph, index, train_idx, labels_idx, params, mc, state, config, rng)
        epoch_seconds.append(time.perf_counter() - t0)
        loss_history.append(mean_loss)
        for pid in index.pattern_ids:
            mean_beta = beta_sum[pid] / beta_n[pid] if beta_n[pid] else None
            trend.append((epoch, pid, mean_beta))

    all_idx = train_idx + test_idx
    embed = _embed_all(graph, index, all_idx, params, mc, config.batch_size)
    embeddings = {graph.ids[i]: embed.z[i] for i in all_idx}
    probabilities = {graph.ids[i]: embed.p[i] for i in all_idx}

    test_labels = {i: labels[i] for i in test_ids}
    if config.eval_mode == "direct":
        metrics = evaluate({i: probabilities[i] for i in test_ids}, test_labels, "direct")
    else:
        metrics = evaluate({i: embeddings[i] for i in test_ids}, test_labels,
                           "downstream",
                           train_embeddings={i: embeddings[i] for i in train_ids},
                           train_labels=train_y, seed=config.seed)
    metrics.loss_history = loss_history
    metrics.epoch_seconds = epoch_seconds
    return TrainResult(params, metrics, trend, train_ids, test_ids,
                       embeddings, probabilities)


# --- timing sweep ---------------------------------------------------------------------

@dataclass
class SweepRow:
    n_nodes: int
    epochs: int
    seconds: float


def train_to_threshold(graph: HetGraph, index: NeighborIndex,
                       labels: dict[str, int], config: TrainConfig, *,
                       loss_threshold: float = 0.2,
                       max_epochs: int = 500) -> SweepRow:
    """Train until the epoch mean loss crosses the threshold; report wall time."""
    train_ids, _ = split_dataset(labels, config.psr, config.test_fraction, config.seed)
    labels_idx = labels_to_indices(graph, labels)
    train_idx = [graph.index[i] for i in train_ids]
    mc = config.model_config()
    params = init_params(graph.schema, index.patterns, mc, config.seed)
    state = init_adam_state(params)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    epochs = 0
    for _ in range(max_epochs):
        mean_loss, _, _ = _run_epoch(
            graph, index, train_idx, labels_idx, params, mc, state, config, rng)
        epochs += 1
        if mean_loss <= loss_threshold:
            break
    return SweepRow(len(graph), epochs, time.perf_counter() - t0)


def timing_sweep(sizes: Sequence[int], make_dataset, config: TrainConfig, *,
                 loss_threshold: float = 0.2,
                 max_epochs: int = 500) -> list[SweepRow]:
    """One row per graph size: nodes, epochs to the loss threshold, seconds.

    ``make_dataset(total_nodes)`` must return (graph, index, labels).
    """
    rows = []
    for n in sizes:
        graph, index, labels = make_dataset(n)
        rows.append(train_to_threshold(graph, index, labels, config,
                                       loss_threshold=loss_threshold,
                                       max_epochs=max_epochs))
    return rows


def psr_sweep(graph: HetGraph, index: NeighborIndex, labels: dict[str, int],
              config: TrainConfig, psrs: Sequence[float] = PSR_GRID
              ) -> list[tuple[float, Metrics]]:
    return [(psr, train(graph, index, labels, replace(config, psr=psr)).metrics)
            for psr in psrs]
