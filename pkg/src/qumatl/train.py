"""Summed per-annotator cross-entropy with missing-label masking, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .data import MISSING, Dataset, check_annotator_coverage, majority_labels
from .model import VARIANTS, QumatlModel, build_graph
from .seeding import rng_for

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
EVAL_CHUNK = 512
# head tensors whose leading axis indexes annotators
_PER_ANNOTATOR = ("head_w1", "head_b1", "head_w2", "head_b2")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 25
    batch_size: int = 32
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    warmup_frac: float = 0.2
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(f"patience {self.patience} must be in [0, max_epochs={self.max_epochs})")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.base_lr < 0 or self.weight_decay < 0 or self.max_grad_norm <= 0:
            raise ValueError("base_lr, weight_decay must be >= 0 and max_grad_norm > 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_avg_acc: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return min(r.val_loss for r in self.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_avg_acc", "lr"])
        for r in self.epochs:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_avg_acc), repr(r.lr)])
        return buf.getvalue()


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"class {label} outside [0, {probs.shape[-1]})")
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def _target_mask(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot targets with all-zero rows where the label is MISSING."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.zeros(labels.shape + (num_classes,))
    present = labels != MISSING
    if np.any(labels[present] >= num_classes) or np.any(labels[present] < 0):
        raise ValueError(f"label outside [0, {num_classes})")
    np.put_along_axis(mask, np.where(present, labels, 0)[..., None], present[..., None].astype(float), axis=-1)
    return mask


def total_loss(probs, labels):
    """Sum over present annotators of -log p[y]; MISSING entries add nothing.

    ``probs`` is (n, C) for one sample, or (B, n, C) for a batch (then summed
    over the batch as well). Works on tape values and plain arrays.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1 and not np.any(labels != MISSING):
        raise ValueError("all labels missing for this sample")
    c = nx.value_of(probs).shape[-1]
    return nx.mul(nx.total(nx.mul(nx.log_clipped(probs, PROB_FLOOR), _target_mask(labels, c))), -1.0)


def batch_loss(probs, labels):
    """Per-batch mean of the per-sample summed loss."""
    return nx.mul(total_loss(probs, labels), 1.0 / len(labels))


def training_targets(dataset: Dataset, variant: str) -> np.ndarray:
    """(N, n) labels, or (N, 1) majority labels for the pooled consensus model."""
    if variant == "pooledPremv":
        return majority_labels(dataset.labels, dataset.num_classes)[:, None]
    return dataset.labels


def _as_rows(probs, variant):
    if variant != "pooledPremv":
        return probs
    shape = nx.value_of(probs).shape
    return nx.reshape(probs, shape[:-1] + (1, shape[-1]))


def predict_probs(model: QumatlModel, tokens: np.ndarray) -> np.ndarray:
    out = []
    for i in range(0, len(tokens), EVAL_CHUNK):
        probs, _ = build_graph(model, tokens[i : i + EVAL_CHUNK])
        out.append(np.asarray(probs))
    return np.concatenate(out, axis=0)


def predict_labels(model: QumatlModel, dataset: Dataset) -> np.ndarray:
    """Argmax labels: (N, n), or (N,) for the pooled consensus model."""
    return np.argmax(predict_probs(model, dataset.tokens), axis=-1)


def validation_scores(model: QumatlModel, dataset: Dataset) -> tuple[float, float]:
    """(mean summed loss, mean per-annotator accuracy) on ``dataset``."""
    targets = training_targets(dataset, model.variant)
    probs = _as_rows(predict_probs(model, dataset.tokens), model.variant)
    loss = float(total_loss(probs, targets)) / len(dataset)
    hits = np.argmax(probs, axis=-1) == targets
    present = targets != MISSING
    per = [hits[present[:, k], k].mean() for k in range(targets.shape[1]) if present[:, k].any()]
    return loss, float(np.mean(per))


def train(
    model: QumatlModel,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
) -> tuple[QumatlModel, TrainHistory]:
    """AdamW with warmup/cosine LR, global-norm clipping and early stopping on val loss.

    Returns a copy holding the best-validation weights. ``model`` itself ends
    holding the last weights.
    """
    if cfg.variant != model.variant:
        raise ValueError(f"config variant {cfg.variant!r} != model variant {model.variant!r}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    check_annotator_coverage(train_set.labels)
    targets = training_targets(train_set, cfg.variant)
    keep = np.flatnonzero((targets != MISSING).any(axis=1))
    tokens, targets = train_set.tokens[keep], targets[keep]
    per_annotator_heads = model.params["head_w1"].ndim == 3

    steps_per_epoch = math.ceil(len(keep) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    state = nx.OptimizerState.for_params(
        model.params,
        weight_decay=cfg.weight_decay,
        max_grad_norm=cfg.max_grad_norm,
        base_lr=cfg.base_lr,
    )
    history = TrainHistory()
    best_params, best_loss, waited, step = None, math.inf, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng_for(cfg.seed, f"shuffle/{epoch}").permutation(len(keep))
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            tape = nx.Tape()
            probs, _ = build_graph(model, tokens[idx], tape)
            loss = batch_loss(_as_rows(probs, cfg.variant), targets[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = nx.clip_global_norm(tape.backward(loss), cfg.max_grad_norm)
            step += 1
            lr = nx.lr_schedule(step, total_steps, cfg.warmup_frac, cfg.base_lr)
            active = None
            if per_annotator_heads:
                present = (targets[idx] != MISSING).any(axis=0)
                if not present.all():
                    active = {name: present for name in _PER_ANNOTATOR}
            nx.adamw_step(model.params, grads, state, lr, active)
            running += value * len(idx)
        val_loss, val_acc = validation_scores(model, val_set)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append(EpochRecord(epoch, running / len(keep), val_loss, val_acc, lr))
        log.debug("epoch %d train %.4f val %.4f acc %.3f", epoch, running / len(keep), val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, waited = val_loss, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
            history.best_epoch = epoch
        else:
            waited += 1
            if waited >= max(cfg.patience, 1) and epoch < cfg.max_epochs:
                history.stopped_early = True
                break
    best = model.copy()
    best.params = best_params
    return best, history
