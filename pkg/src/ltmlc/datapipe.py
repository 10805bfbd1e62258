"""On-disk datasets, label harmonization and training-time augmentation.

Dataset layout on disk: a labels CSV with header ``image_id,path,<classes>``
(paths relative to an image directory, or absolute) next to 8-bit PNG files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ClassVocabulary, LabeledDataset, ValidationError, build_vocabulary, check_header
from .rng import SplitMix64


# -- resampling ---------------------------------------------------------------


def crop_resize(image: np.ndarray, top: float, left: float, crop_h: float, crop_w: float,
                out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an axis-aligned window to ``out_h x out_w`` (edge padding).

    Pixel centres are aligned, so a full-size window at the origin is the identity.
    """
    rows = top + (np.arange(out_h) + 0.5) * (crop_h / out_h) - 0.5
    cols = left + (np.arange(out_w) + 0.5) * (crop_w / out_w) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _sample(image, rr, cc)


def _sample(image, rr, cc):
    image = np.asarray(image, dtype=np.float64)
    out = np.empty(rr.shape + (image.shape[2],))
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(image[..., ch], [rr, cc], order=1, mode="nearest")
    return out


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling and edge padding."""
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx,
                         indexing="ij")
    src_r = cos * rr + sin * cc + cy
    src_c = -sin * rr + cos * cc + cx
    return _sample(image, src_r, src_c)


# -- augmentation -------------------------------------------------------------


@dataclass
class AugmentationConfig:
    resize_crop: bool = False
    crop_scale: list = field(default_factory=lambda: [0.8, 1.0])
    hflip: bool = False
    hflip_prob: float = 0.5
    rotation: bool = False
    max_degrees: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValidationError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValidationError("hflip_prob must lie in [0, 1]")
        if self.max_degrees < 0:
            raise ValidationError("max_degrees must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.resize_crop or self.hflip or self.rotation


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: SplitMix64 | None = None) -> np.ndarray:
    """Random resize-crop, then horizontal flip, then rotation; shape is preserved.

    ``rng`` defaults to a fresh stream seeded with ``cfg.seed``.
    """
    if rng is None:
        rng = SplitMix64(cfg.seed)
    out = np.asarray(image, dtype=np.float64)
    h, w = out.shape[:2]
    if cfg.resize_crop:
        lo, hi = cfg.crop_scale
        side = math.sqrt(lo + (hi - lo) * rng.uniform())
        ch, cw = side * h, side * w
        top = rng.uniform() * (h - ch)
        left = rng.uniform() * (w - cw)
        out = crop_resize(out, top, left, ch, cw, h, w)
    if cfg.hflip and rng.uniform() < cfg.hflip_prob:
        out = hflip(out)
    if cfg.rotation:
        out = rotate(out, (2.0 * rng.uniform() - 1.0) * cfg.max_degrees)
    return np.clip(out, 0.0, 1.0)


# -- files --------------------------------------------------------------------


class LabelTable(NamedTuple):
    vocabulary: ClassVocabulary
    image_ids: tuple
    paths: tuple
    labels: np.ndarray


def read_label_table(labels_csv, vocab: ClassVocabulary | None = None) -> LabelTable:
    """Parse ``image_id,path,<classes>``; the vocabulary is taken from the header when not given."""
    with open(labels_csv, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["image_id", "path"]:
        raise ValidationError(f"{labels_csv}: header must start with image_id,path")
    if vocab is None:
        vocab = build_vocabulary(rows[0][2:])
    check_header(rows[0], ["image_id", "path", *vocab.names], f"{labels_csv}: label CSV")
    ids, paths = [], []
    labels = np.zeros((len(rows) - 1, len(vocab)))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(vocab) + 2:
            raise ValidationError(f"{labels_csv}: row {r} has {len(row)} fields, expected {len(vocab) + 2}")
        ids.append(row[0])
        paths.append(row[1])
        for c, cell in enumerate(row[2:]):
            try:
                value = float(cell)
            except ValueError:
                value = math.nan
            if value not in (0.0, 1.0):
                raise ValidationError(
                    f"{labels_csv}: row {r}, class '{vocab.names[c]}': label {cell!r} not in {{0, 1}}"
                )
            labels[r - 1, c] = value
    return LabelTable(vocab, tuple(ids), tuple(paths), labels)


def read_image(path, height: int, width: int) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[:2] != (height, width):
        arr = crop_resize(arr, 0.0, 0.0, arr.shape[0], arr.shape[1], height, width)
    return arr


def load_dataset(labels_csv, image_dir, vocab: ClassVocabulary | None = None,
                 height: int = 64, width: int = 64) -> LabeledDataset:
    table = read_label_table(labels_csv, vocab)
    images = np.empty((len(table.image_ids), height, width, 3), dtype=np.float32)
    for r, rel in enumerate(table.paths):
        path = Path(image_dir) / rel
        if not path.is_file():
            raise ValidationError(f"{labels_csv}: row {r + 1}: image file not found: {path}")
        images[r] = read_image(path, height, width)
    return LabeledDataset(table.vocabulary, table.image_ids, images, table.labels)


def write_label_table(path, vocab: ClassVocabulary, image_ids: Sequence[str],
                      paths: Sequence[str], labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "path", *vocab.names])
        for image_id, rel, row in zip(image_ids, paths, labels):
            writer.writerow([image_id, rel, *(str(int(v)) for v in row)])


def write_dataset(data: LabeledDataset, directory, labels_name: str = "labels.csv") -> Path:
    """Write PNGs under ``directory/images`` plus the labels CSV; returns the CSV path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rels = []
    for image_id, img in zip(data.image_ids, data.images):
        rel = f"images/{image_id}.png"
        pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        if np.array_equal(pixels[..., 0], pixels[..., 1]) and np.array_equal(pixels[..., 0], pixels[..., 2]):
            Image.fromarray(pixels[..., 0]).save(directory / rel)
        else:
            Image.fromarray(pixels).save(directory / rel)
        rels.append(rel)
    if np.any((data.labels != 0) & (data.labels != 1)):
        raise ValidationError("only binary label matrices can be written")
    csv_path = directory / labels_name
    write_label_table(csv_path, data.vocabulary, data.image_ids, rels, data.labels)
    return csv_path


# -- harmonization ------------------------------------------------------------


@dataclass(frozen=True)
class LabelMapping:
    pairs: tuple

    def __post_init__(self):
        pairs = tuple((str(s), str(t)) for s, t in self.pairs)
        sources = [s for s, _ in pairs]
        dup = next((s for i, s in enumerate(sources) if s in sources[:i]), None)
        if dup is not None:
            raise ValidationError(f"source class '{dup}' mapped twice")
        object.__setattr__(self, "pairs", pairs)


def read_mapping(path) -> LabelMapping:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["source", "target"]:
        raise ValidationError(f"{path}: header must be source,target")
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != 2:
            raise ValidationError(f"{path}: row {r} must have two fields")
    return LabelMapping(tuple((row[0], row[1]) for row in rows[1:]))


def harmonize_labels(labels: np.ndarray, source_vocab: ClassVocabulary, mapping: LabelMapping,
                     target_vocab: ClassVocabulary) -> np.ndarray:
    """Project a label matrix into ``target_vocab``; unmapped target classes are 0."""
    out = np.zeros((labels.shape[0], len(target_vocab)))
    for source, target in mapping.pairs:
        if source not in source_vocab:
            raise ValidationError(f"mapping source '{source}' is not an external class")
        if target not in target_vocab:
            raise ValidationError(f"mapping target '{target}' is not in the target vocabulary")
        t = target_vocab.index(target)
        # several sources may feed one target: positive if any of them is
        out[:, t] = np.maximum(out[:, t], labels[:, source_vocab.index(source)])
    return out


def harmonize(external: LabeledDataset, mapping: LabelMapping, target_vocab: ClassVocabulary) -> LabeledDataset:
    labels = harmonize_labels(external.labels, external.vocabulary, mapping, target_vocab)
    ids = tuple(f"ext_{i}" for i in external.image_ids)
    return LabeledDataset(target_vocab, ids, external.images, labels)


def merge(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    if not datasets:
        raise ValidationError("nothing to merge")
    vocab = datasets[0].vocabulary
    for data in datasets[1:]:
        if data.vocabulary.names != vocab.names:
            raise ValidationError("cannot merge datasets with different vocabularies")
    seen = set()
    for data in datasets:
        for image_id in data.image_ids:
            if image_id in seen:
                raise ValidationError(f"duplicate image id '{image_id}' across datasets")
            seen.add(image_id)
    if len(datasets) == 1:
        return datasets[0]
    return LabeledDataset(
        vocab,
        tuple(i for d in datasets for i in d.image_ids),
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
    )
