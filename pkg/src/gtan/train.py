"""Masked semi-supervised training.

Only labeled nodes act as centers. Each batch hides the centers' own labels
from the risk input, so a center's prediction can use its neighbours' labels
but never its own.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import RISK_UNLABELED, FeatureMatrix, risk_index
from .graph import BatchSubgraph, TemporalGraph, sample_batch
from .metrics import UndefinedMetricError, auc
from .model import GtanModel
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class UsageError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; ``result`` holds the last good parameters."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 3e-4
    epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5)")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingBatch:
    centers: np.ndarray
    subgraph: BatchSubgraph
    risk_idx: np.ndarray
    targets: np.ndarray


def assemble_batch(graph: TemporalGraph, centers: np.ndarray, observed: np.ndarray, hops: int,
                   rng: np.random.Generator | None = None, labels: np.ndarray | None = None) -> TrainingBatch:
    """Subgraph around labeled ``centers`` with every center's risk masked.

    ``observed`` is the global label array (-1 unlabeled) the risk input reads;
    targets come from ``labels``, which defaults to ``observed``.
    """
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        raise UsageError("no labeled nodes to use as centers")
    targets = (observed if labels is None else labels)[centers]
    if np.any(targets < 0):
        raise UsageError("center nodes must be labeled")
    sub = sample_batch(graph, centers, hops, rng)
    risk = risk_index(observed[sub.nodes])
    risk[: sub.n_centers] = RISK_UNLABELED
    return TrainingBatch(centers, sub, risk, targets.astype(np.float64))


def bce_loss(p: Tensor, y: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy over the batch centers."""
    return T.binary_cross_entropy(p, y, eps)


@dataclass
class TrainResult:
    model: GtanModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    stopped_early: bool = False

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc"])
        for h in self.history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_auc"])])
        return buf.getvalue()


def temporal_validation_split(timestamps: np.ndarray, nodes: np.ndarray, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the latest ``fraction`` of ``nodes`` by time (ties by id)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    order = nodes[np.lexsort((nodes, timestamps[nodes]))]
    n_val = int(round(len(order) * fraction))
    n_val = min(max(n_val, 1), len(order) - 1) if len(order) > 1 else 0
    cut = len(order) - n_val
    return np.sort(order[:cut]), np.sort(order[cut:])


def _batches(ids: np.ndarray, size: int):
    for s in range(0, len(ids), size):
        yield ids[s:s + size]


def train_step(model: GtanModel, optimizer: T.Adam, batch: TrainingBatch, features: FeatureMatrix,
               rng: np.random.Generator) -> float:
    optimizer.zero_grad()
    with Tape() as tape:
        p = model.forward(batch.subgraph, features, batch.risk_idx, training=True, rng=rng)
        loss = bce_loss(p, batch.targets)
    value = float(loss.data)
    if not np.isfinite(value):
        return value
    tape.backward(loss)
    optimizer.step()
    return value


def train(model: GtanModel, graph: TemporalGraph, features: FeatureMatrix, labels: np.ndarray,
          train_ids: np.ndarray, val_ids: np.ndarray, config: TrainConfig,
          observed: np.ndarray | None = None, progress=None) -> TrainResult:
    """Fit ``model`` on ``train_ids`` and early-stop on validation AUC.

    ``labels`` supplies targets for train and validation nodes. ``observed``
    is the label array visible through risk embeddings; by default it is
    ``labels`` restricted to ``train_ids``. Validation nodes are always hidden
    from it.
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    val_ids = np.asarray(val_ids, dtype=np.int64)
    if train_ids.size == 0:
        raise UsageError("no labeled training nodes")
    if np.any(labels[train_ids] < 0) or np.any(labels[val_ids] < 0):
        raise UsageError("train and validation nodes must be labeled")
    if observed is None:
        observed = np.full(len(labels), -1, dtype=np.int8)
        observed[train_ids] = labels[train_ids]
    else:
        observed = np.array(observed, dtype=np.int8, copy=True)
    observed = observed.copy()
    observed[val_ids] = -1

    rng = np.random.default_rng(config.seed)
    optimizer = T.Adam(model.params, lr=config.lr)
    result = TrainResult(model)
    best = model.copy_parameters()
    best_auc = -np.inf
    since_best = 0
    hops = model.config.layers
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = train_ids[rng.permutation(len(train_ids))]
        losses, weights = [], []
        for centers in _batches(order, config.batch_size):
            batch = assemble_batch(graph, centers, observed, hops, labels=labels)
            value = train_step(model, optimizer, batch, features, rng)
            if not np.isfinite(value):
                model.load_parameters(best)
                result.stopped_early = True
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", result)
            losses.append(value)
            weights.append(len(centers))
        train_loss = float(np.average(losses, weights=weights))
        val_auc = float("nan")
        if val_ids.size:
            scores = infer(model, graph, features, observed, val_ids, config.eval_batch_size)
            try:
                val_auc = auc(scores, labels[val_ids])
            except UndefinedMetricError:
                val_auc = float("nan")
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc,
                               "seconds": time.perf_counter() - t0})
        if progress is not None:
            progress(result.history[-1])
        score = val_auc if np.isfinite(val_auc) else -train_loss
        if score > best_auc:
            best_auc = score
            best = model.copy_parameters()
            result.best_epoch = epoch
            result.best_val_auc = val_auc
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                result.stopped_early = True
                break
    model.load_parameters(best)
    return result


def infer(model: GtanModel, graph: TemporalGraph, features: FeatureMatrix, observed: np.ndarray,
          query_ids: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Fraud scores for ``query_ids``, which must be unlabeled in ``observed``."""
    query_ids = np.asarray(query_ids, dtype=np.int64)
    if query_ids.size == 0:
        return np.zeros(0)
    if np.any(observed[query_ids] >= 0):
        raise UsageError("query nodes must be unlabeled in the observed labels (own-label leakage)")
    out = np.empty(len(query_ids), dtype=np.float64)
    hops = model.config.layers
    pos = 0
    for chunk in _batches(query_ids, batch_size):
        sub = sample_batch(graph, chunk, hops)
        risk = risk_index(observed[sub.nodes])
        risk[: sub.n_centers] = RISK_UNLABELED
        out[pos:pos + len(chunk)] = model.forward(sub, features, risk, training=False).data[:, 0]
        pos += len(chunk)
    return out


def write_history(result: TrainResult, path: str | Path, comments=()) -> None:
    text = "".join(f"# {c}\n" for c in comments) + result.history_csv()
    Path(path).write_text(text, encoding="utf-8")
