import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from ltmlc.core import LabeledDataset, ValidationError, build_vocabulary
from ltmlc.datapipe import (
    AugmentationConfig,
    LabelMapping,
    augment,
    crop_resize,
    harmonize,
    harmonize_labels,
    hflip,
    load_dataset,
    merge,
    read_label_table,
    read_mapping,
    rotate,
    write_dataset,
)
from ltmlc.rng import SplitMix64


def _write_png(path, value=128, size=(8, 8)):
    Image.fromarray(np.full(size, value, dtype=np.uint8)).save(path)


def _dataset(vocab, n, prefix="img", seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(vocab, tuple(f"{prefix}{i}" for i in range(n)), rng.random((n, 8, 8, 3)),
                          rng.integers(0, 2, (n, len(vocab))))


class TestLoadDataset:
    def test_two_rows(self, tmp_path):
        _write_png(tmp_path / "a.png", 0)
        _write_png(tmp_path / "b.png", 255)
        (tmp_path / "labels.csv").write_text("image_id,path,x,y\na,a.png,1,0\nb,b.png,0,1\n")
        data = load_dataset(tmp_path / "labels.csv", tmp_path, height=8, width=8)
        assert data.vocabulary.names == ("x", "y")
        assert data.image_ids == ("a", "b")
        assert data.labels.tolist() == [[1, 0], [0, 1]]
        assert data.images.shape == (2, 8, 8, 3)
        assert data.images[0].max() == 0.0 and data.images[1].min() == 1.0

    def test_bad_label_names_row(self, tmp_path):
        _write_png(tmp_path / "a.png")
        (tmp_path / "labels.csv").write_text("image_id,path,x\na,a.png,1\nb,a.png,2\n")
        with pytest.raises(ValidationError, match="row 2"):
            load_dataset(tmp_path / "labels.csv", tmp_path, height=8, width=8)

    def test_permuted_header(self, tmp_path):
        (tmp_path / "labels.csv").write_text("image_id,path,y,x\n")
        with pytest.raises(ValidationError, match="order"):
            read_label_table(tmp_path / "labels.csv", build_vocabulary(["x", "y"]))

    def test_missing_image(self, tmp_path):
        (tmp_path / "labels.csv").write_text("image_id,path,x\na,nope.png,1\n")
        with pytest.raises(ValidationError, match="not found"):
            load_dataset(tmp_path / "labels.csv", tmp_path, height=8, width=8)

    def test_resizes_to_requested_size(self, tmp_path):
        _write_png(tmp_path / "a.png", 100, size=(16, 16))
        (tmp_path / "labels.csv").write_text("image_id,path,x\na,a.png,0\n")
        data = load_dataset(tmp_path / "labels.csv", tmp_path, height=8, width=8)
        assert data.images.shape == (1, 8, 8, 3)
        np.testing.assert_allclose(data.images, 100 / 255, rtol=1e-6)

    def test_round_trip(self, tmp_path, vocab4):
        data = _dataset(vocab4, 5)
        quantized = np.rint(data.images * 255) / 255
        csv_path = write_dataset(data, tmp_path)
        back = load_dataset(csv_path, tmp_path, height=8, width=8)
        assert back.image_ids == data.image_ids
        np.testing.assert_array_equal(back.labels, data.labels)
        np.testing.assert_allclose(back.images, quantized, atol=1e-6)


class TestHarmonize:
    def test_fourteen_to_twenty_six(self, rng):
        src = build_vocabulary([f"e{i}" for i in range(14)])
        tgt = build_vocabulary([f"t{i}" for i in range(26)])
        mapping = LabelMapping(tuple((f"e{i}", f"t{i}") for i in range(14)))
        labels = rng.integers(0, 2, (30, 14)).astype(float)
        out = harmonize_labels(labels, src, mapping, tgt)
        assert out.shape == (30, 26)
        assert np.all(out[:, 14:] == 0)
        np.testing.assert_array_equal(out[:, :14], labels)

    def test_empty_mapping_all_zero(self, rng):
        src, tgt = build_vocabulary(["a"]), build_vocabulary(["x", "y"])
        out = harmonize_labels(np.ones((3, 1)), src, LabelMapping(()), tgt)
        assert not out.any()

    def test_identity_mapping(self, vocab4):
        data = _dataset(vocab4, 6)
        mapping = LabelMapping(tuple((n, n) for n in vocab4.names))
        out = harmonize(data, mapping, vocab4)
        np.testing.assert_array_equal(out.labels, data.labels)
        assert out.image_ids[0] == "ext_img0"

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_never_invents_positives(self, seed):
        rng = np.random.default_rng(seed)
        src = build_vocabulary([f"e{i}" for i in range(6)])
        tgt = build_vocabulary([f"t{i}" for i in range(5)])
        pairs = tuple((f"e{i}", f"t{rng.integers(5)}") for i in range(6) if rng.random() < 0.6)
        labels = rng.integers(0, 2, (10, 6)).astype(float)
        out = harmonize_labels(labels, src, LabelMapping(pairs), tgt)
        for t in range(5):
            feeders = [src.index(s) for s, tt in pairs if tt == f"t{t}"]
            expected = labels[:, feeders].max(axis=1) if feeders else np.zeros(10)
            np.testing.assert_array_equal(out[:, t], expected)

    def test_mapping_errors(self, tmp_path):
        with pytest.raises(ValidationError, match="mapped twice"):
            LabelMapping((("a", "x"), ("a", "y")))
        with pytest.raises(ValidationError, match="not an external class"):
            harmonize_labels(np.ones((1, 1)), build_vocabulary(["a"]), LabelMapping((("b", "x"),)),
                             build_vocabulary(["x"]))
        (tmp_path / "m.csv").write_text("from,to\n")
        with pytest.raises(ValidationError, match="header"):
            read_mapping(tmp_path / "m.csv")

    def test_read_mapping(self, tmp_path):
        (tmp_path / "m.csv").write_text("source,target\na,x\nb,y\n")
        assert read_mapping(tmp_path / "m.csv").pairs == (("a", "x"), ("b", "y"))


class TestMerge:
    def test_sizes(self, vocab4):
        merged = merge([_dataset(vocab4, 100, "a"), _dataset(vocab4, 50, "b")])
        assert len(merged.image_ids) == 150
        assert merged.labels.shape == (150, 4)

    def test_single_is_identity(self, vocab4):
        data = _dataset(vocab4, 3)
        assert merge([data]) is data

    def test_duplicate_ids(self, vocab4):
        with pytest.raises(ValidationError, match="duplicate"):
            merge([_dataset(vocab4, 3), _dataset(vocab4, 3)])

    def test_vocabulary_mismatch(self, vocab4):
        other = build_vocabulary(["p", "q", "r", "s"])
        with pytest.raises(ValidationError, match="vocabularies"):
            merge([_dataset(vocab4, 2, "a"), _dataset(other, 2, "b")])


class TestAugment:
    def test_all_off_is_identity(self, rng):
        img = rng.random((8, 8, 3))
        assert np.array_equal(augment(img, AugmentationConfig()), img)

    def test_double_flip(self, rng):
        img = rng.random((8, 6, 3))
        assert np.array_equal(hflip(hflip(img)), img)

    def test_zero_rotation(self, rng):
        img = rng.random((9, 7, 3))
        np.testing.assert_allclose(rotate(img, 0.0), img, atol=1e-12)

    def test_full_window_crop(self, rng):
        img = rng.random((8, 8, 3))
        np.testing.assert_allclose(crop_resize(img, 0, 0, 8, 8, 8, 8), img, atol=1e-12)

    def test_forced_flip(self, rng):
        img = rng.random((8, 8, 3))
        cfg = AugmentationConfig(hflip=True, hflip_prob=1.0)
        assert np.array_equal(augment(img, cfg), hflip(img))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_and_shape(self, seed):
        img = np.random.default_rng(seed).random((12, 10, 3))
        cfg = AugmentationConfig(resize_crop=True, hflip=True, rotation=True, max_degrees=30)
        out = augment(img, cfg, SplitMix64(seed))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic(self, rng):
        img = rng.random((8, 8, 3))
        cfg = AugmentationConfig(resize_crop=True, rotation=True, seed=5)
        assert np.array_equal(augment(img, cfg), augment(img, cfg))

    def test_validate(self):
        with pytest.raises(ValidationError):
            AugmentationConfig(crop_scale=[0.9, 0.5]).validate()
