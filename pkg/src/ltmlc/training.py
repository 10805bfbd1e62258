"""Weighted multi-label loss, MixUp, learning-rate schedule and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import LabeledDataset, ValidationError
from .evaluation import map_score
from .model import LabelQueryModel, predict_scores
from .rng import SplitMix64

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 20
    base_lr: float = 5e-5
    warmup_lr: float = 1e-6
    batch_size: int = 32
    mixup_alpha: float = 4.0
    weight_decay: float = 0.01
    seed: int = 0
    class_weights: list | None = None
    eval_batch_size: int = 128

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValidationError("need 0 <= warmup_epochs <= epochs")
        if self.base_lr <= 0 or self.warmup_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.mixup_alpha < 0:
            raise ValidationError("mixup_alpha must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.class_weights is not None:
            check_class_weights(self.class_weights)


def check_class_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("class weights must be a vector of finite positive reals")
    return w


def weighted_bce_loss(logits: torch.Tensor, labels: torch.Tensor, weights) -> torch.Tensor:
    """Class-weighted binary cross-entropy, summed over classes and averaged over examples.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``, which equals
    ``-y log s(z) - (1 - y) log(1 - s(z))`` without overflow.
    """
    if logits.shape != labels.shape or logits.dim() != 2:
        raise ValidationError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} must be equal N x C")
    if not torch.isfinite(logits).all():
        raise ValidationError("non-finite logits")
    w = torch.as_tensor(weights, dtype=logits.dtype)
    if w.shape != (logits.shape[1],):
        raise ValidationError("class weight vector length does not match the number of classes")
    per_entry = logits.clamp(min=0) - logits * labels + torch.log1p(torch.exp(-logits.abs()))
    return (per_entry * w).sum() / logits.shape[0]


def select_upweight_classes(per_class_ap, k: int) -> list[int]:
    """Indices of the ``k`` lowest APs, ties to the lower index.

    Undefined (nan) APs rank after every defined value.
    """
    if k < 0:
        raise ValidationError("k must be non-negative")
    ap = np.asarray(per_class_ap, dtype=np.float64)
    if k > len(ap):
        raise ValidationError(f"k={k} exceeds the number of classes {len(ap)}")
    key = np.where(np.isnan(ap), np.inf, ap)
    order = sorted(range(len(ap)), key=lambda c: (key[c], c))
    return order[:k]


def upweighted(num_classes: int, classes, factor: float) -> np.ndarray:
    w = np.ones(num_classes)
    w[list(classes)] = factor
    return check_class_weights(w)


def mixup_batch(images, labels, alpha: float, rng: SplitMix64):
    """Mix a batch with a shuffled copy of itself using one ``Beta(alpha, alpha)`` draw.

    ``alpha == 0`` disables mixing (lambda = 1).  Works on numpy arrays or torch
    tensors; returns ``(mixed_images, mixed_labels, lam)``.
    """
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")
    if alpha == 0:
        return images, labels, 1.0
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(len(images))
    if isinstance(images, torch.Tensor):
        perm = torch.as_tensor(perm)
    mixed_x = lam * images + (1.0 - lam) * images[perm]
    mixed_y = lam * labels + (1.0 - lam) * labels[perm]
    return mixed_x, mixed_y, lam


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup from ``warmup_lr`` to ``base_lr``, then half-cosine decay to zero."""
    if not 0 <= epoch < cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr + (cfg.base_lr - cfg.warmup_lr) * epoch / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def make_optimizer(model: LabelQueryModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.base_lr, betas=(0.9, 0.999), eps=1e-8,
        weight_decay=cfg.weight_decay,
    )


def train_step(model, optimizer, images: torch.Tensor, labels: torch.Tensor, weights) -> float:
    model.train()
    optimizer.zero_grad()
    loss = weighted_bce_loss(model(images), labels, weights)
    if not torch.isfinite(loss):
        raise TrainingError("non-finite loss")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_mAP: float


@dataclass
class TrainResult:
    state: dict
    history: list = field(default_factory=list)
    best_epoch: int | None = None

    def history_csv(self) -> str:
        lines = ["epoch,lr,train_loss,dev_mAP"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.lr:.17g},{r.train_loss:.17g},{r.dev_mAP:.17g}")
        return "\n".join(lines) + "\n"


def train(model: LabelQueryModel, train_set: LabeledDataset, dev_set: LabeledDataset,
          cfg: TrainConfig, augment_fn=None) -> TrainResult:
    """Optimize ``model`` in place and leave it holding the best-dev-mAP weights.

    ``augment_fn(image, rng)`` is applied per example before MixUp when given.
    """
    cfg.validate()
    for data in (train_set, dev_set):
        if data.vocabulary.names != model.vocab.names:
            raise ValidationError("dataset vocabulary differs from the model vocabulary")
    num_classes = len(model.vocab)
    weights = np.ones(num_classes) if cfg.class_weights is None else check_class_weights(cfg.class_weights)
    if len(weights) != num_classes:
        raise ValidationError("class_weights length does not match the vocabulary")

    dtype = next(model.parameters()).dtype
    weights_t = torch.as_tensor(weights, dtype=dtype)
    optimizer = make_optimizer(model, cfg)
    rng = SplitMix64(cfg.seed)
    result = TrainResult(state=copy.deepcopy(model.state_dict()))
    best = -math.inf

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images = train_set.images[idx].astype(np.float64)
            if augment_fn is not None:
                images = np.stack([augment_fn(img, rng.spawn()) for img in images])
            x = torch.as_tensor(images, dtype=dtype)
            y = torch.as_tensor(train_set.labels[idx], dtype=dtype)
            x, y, _ = mixup_batch(x, y, cfg.mixup_alpha, rng)
            try:
                losses.append(train_step(model, optimizer, x, y, weights_t))
            except (TrainingError, ValidationError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
        dev_map = map_score(predict_scores(model, dev_set.images, cfg.eval_batch_size), dev_set.labels)
        record = EpochRecord(epoch, lr, float(np.mean(losses)) if losses else math.nan, dev_map)
        result.history.append(record)
        log.info("epoch %d lr %.3g loss %.4f dev mAP %.4f", epoch, lr, record.train_loss, dev_map)
        if dev_map > best:
            best = dev_map
            result.best_epoch = epoch
            result.state = copy.deepcopy(model.state_dict())

    model.load_state_dict(result.state)
    return result
