"""Shared domain types and bit-exact serialization.

Every matrix in the package is row-major with one column per class, in
vocabulary order.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"LTMLC1\n"


class ValidationError(ValueError):
    """Raised when inputs violate a domain invariant."""


class CheckpointError(ValueError):
    """Base class for checkpoint parse failures."""


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PayloadOverflowError(CheckpointError):
    pass


class OverlappingTensorsError(CheckpointError):
    pass


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValidationError("empty vocabulary")
        index = {}
        for i, name in enumerate(names):
            if not isinstance(name, str) or not name:
                raise ValidationError(f"empty class name at position {i}")
            if name in index:
                raise ValidationError(f"duplicate class '{name}'")
            index[name] = i
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown class '{name}'") from None


def build_vocabulary(names: Iterable[str]) -> ClassVocabulary:
    return ClassVocabulary(tuple(names))


def read_vocabulary(path) -> ClassVocabulary:
    """One class name per line; blank lines are ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return build_vocabulary(line.strip() for line in lines if line.strip())


def write_vocabulary(vocab: ClassVocabulary, path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in vocab.names), encoding="utf-8")


def _check_unique_ids(image_ids: Sequence[str]) -> None:
    seen = set()
    for image_id in image_ids:
        if image_id in seen:
            raise ValidationError(f"duplicate image id '{image_id}'")
        seen.add(image_id)


@dataclass(frozen=True)
class LabeledDataset:
    """Images stacked as an ``N x H x W x 3`` array plus an ``N x C`` label matrix."""

    vocabulary: ClassVocabulary
    image_ids: tuple[str, ...]
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        ids = tuple(self.image_ids)
        object.__setattr__(self, "image_ids", ids)
        labels = np.asarray(self.labels, dtype=np.float64)
        if labels.ndim != 2 or labels.shape != (len(ids), len(self.vocabulary)):
            raise ValidationError(
                f"label matrix shape {labels.shape} does not match "
                f"({len(ids)}, {len(self.vocabulary)})"
            )
        if labels.size and (labels.min() < 0.0 or labels.max() > 1.0):
            raise ValidationError("label entries must lie in [0, 1]")
        images = np.asarray(self.images)
        if images.ndim != 4 or images.shape[0] != len(ids) or images.shape[3] != 3:
            raise ValidationError(f"image array shape {images.shape} is not (N, H, W, 3)")
        _check_unique_ids(ids)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "images", images)

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])


@dataclass(frozen=True)
class PredictionMatrix:
    image_ids: tuple[str, ...]
    scores: np.ndarray
    vocabulary: ClassVocabulary

    def __post_init__(self):
        ids = tuple(self.image_ids)
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape != (len(ids), len(self.vocabulary)):
            raise ValidationError(
                f"score matrix shape {scores.shape} does not match "
                f"({len(ids)}, {len(self.vocabulary)})"
            )
        if not np.all(np.isfinite(scores)) or (
            scores.size and (scores.min() < 0.0 or scores.max() > 1.0)
        ):
            raise ValidationError("score out of range [0, 1]")
        scores.flags.writeable = False
        object.__setattr__(self, "image_ids", ids)
        object.__setattr__(self, "scores", scores)


# -- prediction CSV -----------------------------------------------------------


def format_score(x: float) -> str:
    return format(float(x), ".17g")


def write_predictions(pm: PredictionMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(("image_id",) + pm.vocabulary.names) + "\n")
        for image_id, row in zip(pm.image_ids, pm.scores):
            fh.write(",".join([image_id] + [format_score(v) for v in row]) + "\n")


def check_header(header: Sequence[str], expected: Sequence[str], what: str) -> None:
    header = list(header)
    expected = list(expected)
    if header == expected:
        return
    missing = [c for c in expected if c not in header]
    extra = [c for c in header if c not in expected]
    detail = []
    if missing:
        detail.append("missing columns: " + ", ".join(missing))
    if extra:
        detail.append("extra columns: " + ", ".join(extra))
    if not detail:
        first = next(i for i, (a, b) in enumerate(zip(header, expected)) if a != b)
        detail.append(
            f"column order differs at position {first}: "
            f"found '{header[first]}', expected '{expected[first]}'"
        )
    raise ValidationError(f"{what} header mismatch ({'; '.join(detail)})")


def read_predictions(path, vocab: ClassVocabulary) -> PredictionMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty prediction file")
    check_header(rows[0], ("image_id",) + vocab.names, "prediction CSV")
    ids = []
    scores = np.empty((len(rows) - 1, len(vocab)), dtype=np.float64)
    for r, row in enumerate(rows[1:]):
        if len(row) != len(vocab) + 1:
            raise ValidationError(f"row {r + 1}: expected {len(vocab) + 1} fields")
        ids.append(row[0])
        values = [float(v) for v in row[1:]]
        for v in values:
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"row {r + 1}: score out of range: {v}")
        scores[r] = values
    return PredictionMatrix(tuple(ids), scores, vocab)


# -- checkpoints -------------------------------------------------------------


def write_checkpoint(state: Mapping[str, np.ndarray], config: Mapping, vocab: ClassVocabulary, path) -> None:
    """Write named float32 tensors, a JSON-able config and the vocabulary.

    Layout: magic, u64 little-endian manifest length, UTF-8 JSON manifest,
    payload of little-endian float32 tensors laid out back to back.
    """
    descriptors = []
    chunks = []
    offset = 0
    for name, tensor in state.items():
        arr = np.asarray(tensor)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor '{name}' has non-finite entries")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descriptors.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32",
             "offset": offset, "length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"tensors": descriptors, "config": config, "vocabulary": list(vocab.names)},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def parse_checkpoint(blob: bytes):
    """Inverse of :func:`write_checkpoint` on an in-memory byte string."""
    n_magic = len(CHECKPOINT_MAGIC)
    if len(blob) < n_magic or blob[:n_magic] != CHECKPOINT_MAGIC:
        raise BadMagicError("bad magic")
    if len(blob) < n_magic + 8:
        raise TruncatedCheckpointError("truncated file: missing manifest length")
    (manifest_len,) = struct.unpack("<Q", blob[n_magic:n_magic + 8])
    start = n_magic + 8
    if len(blob) < start + manifest_len:
        raise TruncatedCheckpointError("truncated file: manifest shorter than declared")
    try:
        manifest = json.loads(blob[start:start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    payload = memoryview(blob)[start + manifest_len:]

    state = {}
    spans = []
    for desc in manifest["tensors"]:
        name = desc["name"]
        if name in state:
            raise CheckpointError(f"tensor '{name}' named twice")
        if desc.get("dtype") != "float32":
            raise CheckpointError(f"tensor '{name}': unsupported dtype {desc.get('dtype')}")
        shape = tuple(int(s) for s in desc["shape"])
        offset, length = int(desc["offset"]), int(desc["length"])
        if offset < 0 or length < 0 or offset + length > len(payload):
            raise PayloadOverflowError(
                f"payload overflow: tensor '{name}' ends at byte {offset + length}, "
                f"payload has {len(payload)}"
            )
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor '{name}': length does not match shape")
        spans.append((offset, offset + length, name))
        state[name] = np.frombuffer(payload[offset:offset + length], dtype="<f4").reshape(shape).copy()
    spans.sort()
    for (_, end_a, a), (start_b, _, b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise OverlappingTensorsError(f"tensors '{a}' and '{b}' overlap")
    vocab = build_vocabulary(manifest["vocabulary"])
    return state, manifest["config"], vocab


def read_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


def csv_text(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()
