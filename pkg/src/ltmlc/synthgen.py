"""Synthetic long-tailed multi-label images.

Each class owns a fixed cell of a 5 x 6 grid; an active class paints a
Gaussian bump in its cell.  Prevalence decays exponentially from the head
class to the tail, and a few parent/child pairs inject label co-occurrence.

Draw order per example (one sequential SplitMix64 stream per dataset):
C uniforms for the independent Bernoulli labels, one uniform per triggered
co-occurrence pair in list order, then H*W normals for the background noise
(skipped when ``noise_std == 0``).  The three splits use consecutive child
streams spawned from the seed in the order train, dev, test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LabeledDataset, ValidationError, build_vocabulary
from .rng import SplitMix64

GRID_COLS = 5
GRID_ROWS = 6
BUMP_AMPLITUDE = 0.8
BUMP_SIGMA = 3.0
BACKGROUND = 0.1

DEFAULT_COOC_PAIRS = ((0, 13, 0.5), (1, 14, 0.5), (2, 17, 0.5), (3, 20, 0.5), (4, 23, 0.5))


@dataclass
class SynthConfig:
    num_classes: int = 26
    p_head: float = 0.5
    imbalance_ratio: float = 100.0
    cooc_pairs: list = field(default_factory=lambda: [list(p) for p in DEFAULT_COOC_PAIRS])
    image_size: int = 64
    noise_std: float = 0.05
    seed: int = 0
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if not 0.0 < self.p_head <= 1.0:
            raise ValidationError("p_head must lie in (0, 1]")
        if self.imbalance_ratio < 1.0:
            raise ValidationError("imbalance_ratio must be >= 1")
        if self.image_size < 1 or self.noise_std < 0:
            raise ValidationError("image_size must be positive and noise_std non-negative")
        for parent, child, q in self.cooc_pairs:
            if parent == child:
                raise ValidationError(f"co-occurrence pair ({parent}, {child}) has parent == child")
            if not (0 <= parent < self.num_classes and 0 <= child < self.num_classes):
                raise ValidationError(f"co-occurrence pair ({parent}, {child}) out of range")
            if not 0.0 <= q <= 1.0:
                raise ValidationError(f"co-occurrence probability {q} outside [0, 1]")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")


def class_prevalences(num_classes: int, p_head: float, imbalance_ratio: float) -> np.ndarray:
    """``p_c = p_head * ratio ** (-c / (C - 1))``; a single class gets ``p_head``."""
    if num_classes == 1:
        return np.array([float(p_head)])
    c = np.arange(num_classes, dtype=np.float64)
    return p_head * float(imbalance_ratio) ** (-c / (num_classes - 1))


def sample_labels(prevalences, cooc_pairs, rng: SplitMix64) -> np.ndarray:
    prevalences = np.asarray(prevalences, dtype=np.float64)
    labels = (rng.uniform(len(prevalences)) < prevalences).astype(np.float64)
    for parent, child, q in cooc_pairs:
        if labels[parent] == 1.0 and rng.uniform() < q:
            labels[child] = 1.0
    return labels


def class_center(c: int, height: int, width: int) -> tuple[float, float]:
    """(row, col) of the bump centre for class ``c`` in pixel-index coordinates."""
    return (c // GRID_COLS + 0.5) / GRID_ROWS * height, (c % GRID_COLS + 0.5) / GRID_COLS * width


def render_image(labels, config: SynthConfig, rng: SplitMix64) -> np.ndarray:
    labels = np.asarray(labels)
    if len(labels) > GRID_COLS * GRID_ROWS:
        raise ValidationError("grid exhausted")
    size = config.image_size
    if config.noise_std > 0:
        img = BACKGROUND + config.noise_std * rng.normal(size * size).reshape(size, size)
    else:
        img = np.full((size, size), BACKGROUND)
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    for c in np.flatnonzero(labels):
        cy, cx = class_center(int(c), size, size)
        img = img + BUMP_AMPLITUDE * np.exp(
            -((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * BUMP_SIGMA ** 2)
        )
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2)


def synth_vocabulary(num_classes: int):
    return build_vocabulary(f"class_{c:02d}" for c in range(num_classes))


def _generate_split(name: str, n: int, config: SynthConfig, prevalences, rng: SplitMix64) -> LabeledDataset:
    size = config.image_size
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.empty((n, config.num_classes), dtype=np.float64)
    for i in range(n):
        labels[i] = sample_labels(prevalences, config.cooc_pairs, rng)
        images[i] = render_image(labels[i], config, rng)
    ids = tuple(f"synth_{name}_{i}" for i in range(n))
    return LabeledDataset(synth_vocabulary(config.num_classes), ids, images, labels)


def generate_dataset(config: SynthConfig):
    """Return ``(train, dev, test)`` datasets, deterministic in ``config.seed``."""
    config.validate()
    if config.num_classes > GRID_COLS * GRID_ROWS:
        raise ValidationError("grid exhausted")
    prevalences = class_prevalences(config.num_classes, config.p_head, config.imbalance_ratio)
    root = SplitMix64(config.seed)
    splits = []
    for name, n in (("train", config.n_train), ("dev", config.n_dev), ("test", config.n_test)):
        splits.append(_generate_split(name, n, config, prevalences, root.spawn()))
    return tuple(splits)
