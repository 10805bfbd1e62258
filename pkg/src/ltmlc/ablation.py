"""Trick on/off grid over separate heads, reweighting, MixUp and TTA."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math

import numpy as np

from .config import TOGGLES, RunConfig
from .core import LabeledDataset
from .datapipe import augment
from .evaluation import per_class_ap
from .model import LabelQueryModel, predict_scores
from .rng import SplitMix64
from .training import select_upweight_classes, train, upweighted
from .inference import tta_scores

log = logging.getLogger(__name__)


def fit_model(cfg: RunConfig, train_set: LabeledDataset, dev_set: LabeledDataset,
              embeddings=None, **overrides):
    """Train one model from ``cfg``; ``overrides`` replace TrainConfig or ModelConfig fields."""
    model_fields = {f.name for f in dataclasses.fields(cfg.model)}
    model_cfg = dataclasses.replace(cfg.model, **{k: v for k, v in overrides.items() if k in model_fields})
    train_cfg = dataclasses.replace(cfg.train, **{k: v for k, v in overrides.items() if k not in model_fields})
    model = LabelQueryModel(model_cfg, train_set.vocabulary, embeddings)
    augment_fn = None
    if cfg.augment.enabled:
        aug = cfg.augment

        def augment_fn(img, rng):
            # per-example stream from the training RNG, offset by the augmentation seed
            return augment(img, aug, SplitMix64(int(rng.next_u64(1)[0]) ^ aug.seed))
    result = train(model, train_set, dev_set, train_cfg, augment_fn=augment_fn)
    return model, result


def _dev_scores(model, dev_set, use_tta: bool, cfg: RunConfig):
    if use_tta:
        return tta_scores(model, dev_set.images, cfg.tta.transforms(), cfg.tta.merge,
                          cfg.train.eval_batch_size)
    return predict_scores(model, dev_set.images, cfg.train.eval_batch_size)


def _mean_defined(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else math.nan


def base_settings(cfg: RunConfig) -> dict:
    return {
        "separate_classifier": cfg.model.head_mode == "separate",
        "reweighting": cfg.train.class_weights is not None,
        "mixup": cfg.train.mixup_alpha > 0,
        "tta": cfg.tta.enabled,
    }


def run_ablation(cfg: RunConfig, train_set: LabeledDataset, dev_set: LabeledDataset, embeddings=None):
    """Evaluate every on/off combination of ``cfg.ablate.toggles`` on the dev set.

    Tricks not listed as toggles keep their setting from the base config.  A
    reweighted cell upweights the ``upweight_k`` classes with the lowest dev AP
    under the matching cell without reweighting.  TTA only changes inference,
    so cells differing only in TTA share one trained model.

    Returns a list of row dicts with the four toggle columns, ``dev_mAP`` and
    ``tail_mAP`` (mean dev AP over the classes chosen for upweighting).
    """
    toggles = list(cfg.ablate.toggles)
    base = base_settings(cfg)
    num_classes = len(dev_set.vocabulary)
    k = min(cfg.ablate.upweight_k, num_classes)
    trained = {}  # (separate, reweight, mixup) -> (model, dev scores without TTA)

    def cell(separate, reweight, mixup):
        key = (separate, reweight, mixup)
        if key not in trained:
            if not reweight:
                weights = None
            elif "reweighting" in toggles:
                plain_scores = cell(separate, False, mixup)[1]
                worst = select_upweight_classes(per_class_ap(plain_scores, dev_set.labels), k)
                weights = upweighted(num_classes, worst, cfg.ablate.upweight_factor).tolist()
            else:
                weights = cfg.train.class_weights
            trained[key] = _train_cell(cfg, train_set, dev_set, embeddings, separate, mixup, weights)
        return trained[key]

    rows = []
    for values in itertools.product((False, True), repeat=len(toggles)):
        setting = dict(base)
        setting.update(zip(toggles, values))
        model, plain_scores = cell(setting["separate_classifier"], setting["reweighting"], setting["mixup"])
        if setting["reweighting"] and "reweighting" in toggles:
            plain_scores = cell(setting["separate_classifier"], False, setting["mixup"])[1]
        tail = select_upweight_classes(per_class_ap(plain_scores, dev_set.labels), k)
        scores = _dev_scores(model, dev_set, setting["tta"], cfg)
        aps = per_class_ap(scores, dev_set.labels)
        row = {name: int(setting[name]) for name in TOGGLES}
        row["dev_mAP"] = _mean_defined(aps)
        row["tail_mAP"] = _mean_defined(aps[tail]) if tail else math.nan
        log.info("ablation cell %s: dev mAP %.4f", row, row["dev_mAP"])
        rows.append(row)
    return rows


def _train_cell(cfg, train_set, dev_set, embeddings, separate, mixup, weights):
    alpha = (cfg.train.mixup_alpha or cfg.ablate.mixup_alpha) if mixup else 0.0
    model, _ = fit_model(
        cfg, train_set, dev_set, embeddings,
        head_mode="separate" if separate else "shared",
        mixup_alpha=alpha,
        class_weights=weights,
    )
    return model, predict_scores(model, dev_set.images, cfg.train.eval_batch_size)


def ablation_csv(rows) -> str:
    header = list(TOGGLES) + ["dev_mAP", "tail_mAP"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            str(row[h]) if h in TOGGLES else format(row[h], ".17g") for h in header
        ))
    return "\n".join(lines) + "\n"
