"""Episodic meta-training, evaluation metrics and the data-proportion sweep."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SplitSpec, normalize_dataset, split, subsample
from .episodes import sample_batch
from .model import FssModel, ModelConfig
from .optim import adam_step, clip_grad_norm
from .tensor import NumericError, RngStream, backward, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)

# stream keys for RngStream.spawn
_TASKS, _DROPOUT, _VAL, _INIT = 1, 2, 3, 4


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 50
    tasks_per_batch: int = 50
    batches_per_epoch: int = 50
    seed: int = 0
    ways: int = 2
    shots: int = 2
    queries: int = 1
    val_tasks: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # joint gradient-norm ceiling; 0 disables clipping
    clip_norm: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.clip_norm < 0 or self.weight_decay < 0:
            raise ValueError("clip_norm and weight_decay must be >= 0")
        if self.epochs < 1 or self.tasks_per_batch < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs, tasks_per_batch and batches_per_epoch must be >= 1")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metrics_from_confusion(confusion):
    """Macro precision, macro recall and accuracy from a true x predicted count table."""
    c = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(c)
    pred = c.sum(axis=0)
    true = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred > 0, tp / np.where(pred > 0, pred, 1), 0.0)
        recall = np.where(true > 0, tp / np.where(true > 0, true, 1), 0.0)
    total = c.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return float(precision.mean()), float(recall.mean()), accuracy


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: float
    recall: float
    accuracy: float
    n_tasks: int = 0
    seed: int | None = None
    proportion: float | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, confusion, **kw):
        p, r, a = metrics_from_confusion(confusion)
        return cls(np.asarray(confusion, dtype=np.int64), p, r, a, **kw)

    def to_dict(self, wall_time_s=None):
        out = {
            "proportion": self.proportion,
            "f": self.extra.get("f"),
            "dropout": self.extra.get("dropout"),
            "params": self.extra.get("params"),
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "seed": self.seed,
            "wall_time_s": wall_time_s,
        }
        out.update({k: v for k, v in self.extra.items() if k not in out})
        return out


def trimmed_mean(values):
    """Mean of seven values after dropping one maximum and one minimum."""
    values = list(values)
    if len(values) != 7:
        raise ValueError(f"trimmed_mean expects exactly 7 values, got {len(values)}")
    return math.fsum(sorted(values)[1:-1]) / 5


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def query_loss(model, batch, training, rng=None):
    """Mean cross-entropy over the query logits only."""
    logits = model.forward(batch, training, rng)
    return softmax_cross_entropy(logits, batch.query_truth)


def meta_train(model, train_set, val_set, cfg, on_epoch=None):
    """Adam over batches of sampled episodes; returns per-epoch history rows."""
    root = RngStream(cfg.seed)
    task_rng = root.spawn(_TASKS)
    drop_rng = root.spawn(_DROPOUT)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for b in range(cfg.batches_per_epoch):
            batch = sample_batch(train_set, cfg.tasks_per_batch, cfg.ways, cfg.shots, cfg.queries, task_rng)
            try:
                loss = query_loss(model, batch, True, drop_rng)
                backward(loss, model.params)
                if cfg.clip_norm:
                    clip_grad_norm(model.params, cfg.clip_norm)
                adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}, batch {b + 1}: {e}") from e
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_set is not None and cfg.val_tasks > 0:
            rep = evaluate(model, val_set, cfg.val_tasks, root.spawn(_VAL))
            row["val_accuracy"] = rep.accuracy
        else:
            row["val_accuracy"] = float("nan")
        history.append(row)
        log.info("epoch %d  loss %.4f  val_acc %.4f", epoch, row["train_loss"], row["val_accuracy"])
        if on_epoch is not None:
            on_epoch(row)
    return history


def predict(model, batch):
    with no_grad():
        logits = model.forward(batch, training=False)
    return logits.data.argmax(axis=-1)


def evaluate(model, dataset, n_tasks, rng, batch_size=100):
    """Confusion (original class ids) and metrics over ``n_tasks`` sampled episodes."""
    cfg = model.config
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    conf = np.zeros((dataset.n_classes, dataset.n_classes), dtype=np.int64)
    done = 0
    while done < n_tasks:
        n = min(batch_size, n_tasks - done)
        batch = sample_batch(dataset, n, cfg.ways, cfg.shots, cfg.queries, rng)
        pred = predict(model, batch)
        rows = np.arange(n)[:, None]
        truth = batch.class_maps[rows, batch.query_truth]
        guess = batch.class_maps[rows, pred]
        np.add.at(conf, (truth.ravel(), guess.ravel()), 1)
        done += n
    return MetricsReport.from_confusion(conf, n_tasks=n_tasks, seed=rng.seed)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@dataclass
class Pools:
    train: object
    val: object
    test: object
    n_d: int
    n_min: int
    n_max: int


def prepare_pools(dataset, proportion=1.0, seed=0, split_spec=None, min_per_class=3):
    """Normalize, split 70/10/20 and subsample the training pool."""
    spec = split_spec or SplitSpec(seed=seed)
    train, val, test = split(normalize_dataset(dataset), spec)
    sub = subsample(train, proportion, seed, min_per_class=min_per_class)
    n_max = len(train)
    return Pools(sub, val, test, len(sub), int(round(0.1 * n_max)), n_max)


def derive_config(pools, cfg, **kw):
    return ModelConfig.from_pool(pools.n_d, pools.n_min, pools.n_max, cfg.ways, cfg.shots, cfg.queries, **kw)


def build_model(pools, cfg, dtype="float32"):
    """Fresh model sized for ``pools``; initialization is keyed on ``cfg.seed``."""
    return FssModel(derive_config(pools, cfg, dtype=dtype), seed=RngStream(cfg.seed).spawn(_INIT).seed)


def train_model(pools, cfg, dtype="float32", on_epoch=None):
    model = build_model(pools, cfg, dtype)
    history = meta_train(model, pools.train, pools.val, cfg, on_epoch=on_epoch)
    return model, history


@dataclass
class SweepResult:
    rows: list
    slope: float
    intercept: float


def fit_slope(x, y):
    """Least-squares line through (x, y); a flat y gives a slope of exactly 0."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    # dx sums to zero, so shifting y by any constant leaves the slope unchanged
    dx, dy = x - x.mean(), y - y[0]
    slope = float(dx @ dy / (dx @ dx))
    return slope, float(y.mean() - slope * x.mean())


def proportion_sweep(dataset, proportions, cfg, eval_tasks=1000, dtype="float32", split_seed=None):
    """Train and test one adaptive model per training-pool proportion."""
    split_seed = cfg.seed if split_seed is None else split_seed
    rows = []
    for p in proportions:
        t0 = time.perf_counter()
        pools = prepare_pools(dataset, p, split_seed, min_per_class=cfg.shots + cfg.queries)
        model, history = train_model(pools, cfg, dtype)
        rep = evaluate(model, pools.test, eval_tasks, RngStream(cfg.seed).spawn(100))
        vals = [h["val_accuracy"] for h in history]
        rows.append(
            {
                "proportion": float(p),
                "n_train": pools.n_d,
                "f": model.config.f,
                "dropout": model.config.dropout_rate,
                "params": model.count_parameters(),
                "accuracy": rep.accuracy,
                "precision": rep.precision,
                "recall": rep.recall,
                "val_trimmed": trimmed_mean(vals[-7:]) if len(vals) >= 7 else None,
            }
        )
        log.info(
            "proportion %.2f  f=%d  dropout=%.2f  acc=%.4f  (%.0fs)",
            p, model.config.f, model.config.dropout_rate, rep.accuracy, time.perf_counter() - t0,
        )
    slope, intercept = fit_slope([r["proportion"] for r in rows], [r["accuracy"] for r in rows])
    return SweepResult(rows, slope, intercept)


def export_embeddings(model, dataset, n, rng=None):
    """``(features n x 128, labels)`` for the first ``n`` windows (or a random draw)."""
    n = min(n, len(dataset))
    idx = np.arange(n) if rng is None else np.sort(rng.choice(len(dataset), size=n, replace=False))
    with no_grad():
        feats, _ = model.embed(dataset.windows[idx], training=False)
    return feats.data.astype(np.float64), dataset.labels[idx]
