"""Test-time augmentation and prediction ensembling."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import LabeledDataset, PredictionMatrix, ValidationError
from .datapipe import crop_resize, hflip
from .evaluation import per_class_ap
from .model import LabelQueryModel, predict_scores
from .rng import SplitMix64

TTA_FLOOR = 1e-12
TRANSFORM_KINDS = ("identity", "hflip", "center_crop", "random_crop")


@dataclass(frozen=True)
class Transform:
    kind: str = "identity"
    fraction: float = 0.9
    seed: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValidationError(f"unknown transform '{self.kind}'; expected one of {TRANSFORM_KINDS}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError("crop fraction must lie in (0, 1]")

    def __call__(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        out = image
        if self.kind == "hflip":
            out = hflip(image)
        elif self.kind in ("center_crop", "random_crop"):
            ch, cw = self.fraction * h, self.fraction * w
            if self.kind == "center_crop":
                top, left = (h - ch) / 2.0, (w - cw) / 2.0
            else:
                rng = SplitMix64(self.seed)
                top, left = rng.uniform() * (h - ch), rng.uniform() * (w - cw)
            out = crop_resize(image, top, left, ch, cw, h, w)
        if self.flip:
            out = hflip(out)
        return out


DEFAULT_BANK = (
    Transform("identity"),
    Transform("hflip"),
    Transform("center_crop", 0.9),
    Transform("center_crop", 0.9, flip=True),
)


def parse_bank(items) -> tuple[Transform, ...]:
    """Build a bank from JSON-style dicts, e.g. ``[{"kind": "hflip"}]``."""
    bank = []
    for i, item in enumerate(items):
        unknown = set(item) - {"kind", "fraction", "seed", "flip"}
        if unknown:
            raise ValidationError(f"transform {i}: unknown keys {sorted(unknown)}")
        bank.append(Transform(**item))
    if not bank:
        raise ValidationError("TTA bank must not be empty")
    return tuple(bank)


def read_bank(path) -> tuple[Transform, ...]:
    with open(path, encoding="utf-8") as fh:
        return parse_bank(json.load(fh))


def bank_to_json(bank: Sequence[Transform]) -> list:
    return [asdict(t) for t in bank]


def merge_tta(stack: np.ndarray, merge: str = "geometric") -> np.ndarray:
    """Merge a ``(T, N, C)`` stack of per-transform scores.

    The geometric mean floors scores at ``TTA_FLOOR``.  The result is kept
    inside the per-entry [min, max] of the inputs so that agreeing transforms
    reproduce their common score exactly.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if merge == "geometric":
        merged = np.exp(np.mean(np.log(np.maximum(stack, TTA_FLOOR)), axis=0))
    elif merge == "arithmetic":
        merged = np.mean(stack, axis=0)
    else:
        raise ValidationError(f"unknown TTA merge '{merge}'")
    merged = np.clip(merged, stack.min(axis=0), stack.max(axis=0))
    return np.clip(merged, 0.0, 1.0)


def tta_scores(model: LabelQueryModel, images: np.ndarray, bank: Sequence[Transform],
               merge: str = "geometric", batch_size: int = 128) -> np.ndarray:
    if not bank:
        raise ValidationError("TTA bank must not be empty")
    outputs = []
    for t in bank:
        transformed = np.stack([t(img) for img in images]) if len(images) else images
        if transformed.shape != images.shape:
            raise ValidationError(f"transform {t} changed image shape to {transformed.shape[1:]}")
        outputs.append(predict_scores(model, transformed, batch_size))
    return merge_tta(np.stack(outputs), merge)


def tta_predict(model: LabelQueryModel, data: LabeledDataset, bank: Sequence[Transform] = DEFAULT_BANK,
                merge: str = "geometric", batch_size: int = 128) -> PredictionMatrix:
    if data.vocabulary.names != model.vocab.names:
        raise ValidationError("model and dataset vocabularies differ")
    return PredictionMatrix(data.image_ids, tta_scores(model, data.images, bank, merge, batch_size),
                            model.vocab)


def _check_aligned(preds: Sequence[PredictionMatrix]) -> None:
    if not preds:
        raise ValidationError("no prediction matrices given")
    first = preds[0]
    for i, pm in enumerate(preds[1:], start=1):
        if pm.vocabulary.names != first.vocabulary.names:
            raise ValidationError(f"prediction {i}: vocabulary differs from prediction 0")
        if pm.image_ids != first.image_ids:
            raise ValidationError(f"prediction {i}: image ids differ from prediction 0")


def model_wise_ensemble(preds: Sequence[PredictionMatrix]) -> PredictionMatrix:
    _check_aligned(preds)
    scores = np.mean(np.stack([p.scores for p in preds]), axis=0)
    return PredictionMatrix(preds[0].image_ids, scores, preds[0].vocabulary)


def class_wise_selection(dev_preds: Sequence[PredictionMatrix], dev_labels, k: int) -> list[list[int]]:
    """Per class, the indices of the ``k`` models with the best dev AP.

    Models are ranked by AP descending with ties to the lower index.  A class
    without dev positives falls back to the ranking by overall dev mAP.
    """
    _check_aligned(dev_preds)
    n_models = len(dev_preds)
    if not 1 <= k <= n_models:
        raise ValidationError(f"k={k} must lie in [1, {n_models}]")
    if dev_labels.vocabulary.names != dev_preds[0].vocabulary.names:
        raise ValidationError("dev labels vocabulary differs from predictions")
    if tuple(dev_labels.image_ids) != dev_preds[0].image_ids:
        raise ValidationError("dev labels are not aligned with dev predictions")
    labels = np.asarray(dev_labels.labels)
    aps = np.stack([per_class_ap(p.scores, labels) for p in dev_preds])  # (models, classes)
    defined = ~np.isnan(aps[0])
    if not defined.any():
        raise ValidationError("no class has any dev positive")
    global_map = aps[:, defined].mean(axis=1)
    global_rank = sorted(range(n_models), key=lambda m: (-global_map[m], m))
    selection = []
    names = dev_preds[0].vocabulary.names
    for c in range(aps.shape[1]):
        if defined[c]:
            ranked = sorted(range(n_models), key=lambda m: (-aps[m, c], m))
        else:
            warnings.warn(f"class '{names[c]}' has no dev positives; using global dev mAP ranking",
                          stacklevel=2)
            ranked = global_rank
        # summing in model order keeps k = n_models identical to the model-wise mean
        selection.append(sorted(ranked[:k]))
    return selection


def class_wise_ensemble(dev_preds: Sequence[PredictionMatrix], dev_labels,
                        test_preds: Sequence[PredictionMatrix], k: int = 3) -> PredictionMatrix:
    """Average, per class, the test scores of that class's top-``k`` dev models."""
    _check_aligned(test_preds)
    if len(test_preds) != len(dev_preds):
        raise ValidationError("need one test prediction per dev prediction")
    if test_preds[0].vocabulary.names != dev_preds[0].vocabulary.names:
        raise ValidationError("dev and test vocabularies differ")
    selection = class_wise_selection(dev_preds, dev_labels, k)
    stack = np.stack([p.scores for p in test_preds])
    scores = np.empty(stack.shape[1:])
    for c, models in enumerate(selection):
        scores[:, c] = np.mean(stack[models, :, c], axis=0)
    return PredictionMatrix(test_preds[0].image_ids, scores, test_preds[0].vocabulary)
