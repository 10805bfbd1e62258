import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ltmlc.core import (
    CHECKPOINT_MAGIC,
    BadMagicError,
    CheckpointError,
    OverlappingTensorsError,
    PayloadOverflowError,
    PredictionMatrix,
    TruncatedCheckpointError,
    ValidationError,
    build_vocabulary,
    parse_checkpoint,
    read_checkpoint,
    read_predictions,
    write_checkpoint,
    write_predictions,
)
from ltmlc.model import LabelQueryModel, load_model, model_state, save_model

from conftest import tiny_config


class TestVocabulary:
    def test_order_and_index(self):
        v = build_vocabulary(["atelectasis", "edema"])
        assert len(v) == 2
        assert v.index("edema") == 1

    def test_empty(self):
        with pytest.raises(ValidationError, match="empty vocabulary"):
            build_vocabulary([])

    def test_duplicate(self):
        with pytest.raises(ValidationError, match="duplicate class 'a'"):
            build_vocabulary(["a", "a"])

    def test_empty_name(self):
        with pytest.raises(ValidationError, match="empty class name"):
            build_vocabulary(["a", ""])

    @given(st.lists(st.text(min_size=1), min_size=1, max_size=30, unique=True))
    def test_index_is_bijection(self, names):
        v = build_vocabulary(names)
        assert [v.index(n) for n in names] == list(range(len(names)))
        assert [v.names[v.index(n)] for n in names] == names


def _write_raw(path, manifest: bytes, payload: bytes, magic=CHECKPOINT_MAGIC):
    path.write_bytes(magic + struct.pack("<Q", len(manifest)) + manifest + payload)


class TestCheckpoint:
    def test_model_round_trip_bit_exact(self, tmp_path, vocab4):
        model = LabelQueryModel(tiny_config(init_seed=3), vocab4)
        save_model(model, tmp_path / "m.ltmlc", {"note": "x"})
        state, config, vocab = read_checkpoint(tmp_path / "m.ltmlc")
        original = model_state(model)
        assert set(state) == set(original)
        for name, arr in original.items():
            assert arr.tobytes() == state[name].tobytes(), name
        assert vocab == vocab4
        assert config["note"] == "x"
        assert config["model"]["d"] == 8
        reloaded = load_model(tmp_path / "m.ltmlc")
        x = torch.rand(2, 8, 8, 3)
        assert torch.equal(model.eval()(x), reloaded.eval()(x))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.lists(st.integers(1, 5), min_size=0, max_size=3), min_size=1, max_size=5),
           st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, tmp_path_factory, shapes, seed):
        rng = np.random.default_rng(seed)
        state = {f"t{i}": rng.standard_normal(shape).astype(np.float32) for i, shape in enumerate(shapes)}
        path = tmp_path_factory.mktemp("ck") / "c.bin"
        write_checkpoint(state, {"seed": seed}, build_vocabulary(["a"]), path)
        back, config, _ = read_checkpoint(path)
        assert config == {"seed": seed}
        for name, arr in state.items():
            assert back[name].shape == arr.shape
            assert back[name].tobytes() == arr.tobytes()

    def test_bad_magic(self, tmp_path, vocab4):
        path = tmp_path / "m.ltmlc"
        save_model(LabelQueryModel(tiny_config(), vocab4), path)
        blob = bytearray(path.read_bytes())
        blob[0:3] = b"XYZ"
        with pytest.raises(BadMagicError, match="bad magic"):
            parse_checkpoint(bytes(blob))

    def test_payload_overflow(self, tmp_path):
        manifest = (
            b'{"config": {}, "vocabulary": ["a"], "tensors": '
            b'[{"name": "w", "shape": [2], "dtype": "float32", "offset": 0, "length": 10}]}'
        )
        _write_raw(tmp_path / "c", manifest, b"\0" * 8)
        with pytest.raises(PayloadOverflowError, match="payload overflow"):
            read_checkpoint(tmp_path / "c")

    def test_truncated(self, tmp_path, vocab4):
        path = tmp_path / "m.ltmlc"
        save_model(LabelQueryModel(tiny_config(), vocab4), path)
        blob = path.read_bytes()
        with pytest.raises(TruncatedCheckpointError):
            parse_checkpoint(blob[:12])
        with pytest.raises(TruncatedCheckpointError):
            parse_checkpoint(blob[:40])
        # payload cut short is an overflow of the last tensor
        with pytest.raises(PayloadOverflowError):
            parse_checkpoint(blob[:-4])

    def test_overlap(self, tmp_path):
        manifest = (
            b'{"config": {}, "vocabulary": ["a"], "tensors": ['
            b'{"name": "a", "shape": [2], "dtype": "float32", "offset": 0, "length": 8},'
            b'{"name": "b", "shape": [2], "dtype": "float32", "offset": 4, "length": 8}]}'
        )
        _write_raw(tmp_path / "c", manifest, b"\0" * 12)
        with pytest.raises(OverlappingTensorsError):
            read_checkpoint(tmp_path / "c")

    def test_error_classes_are_distinct(self):
        kinds = {BadMagicError, TruncatedCheckpointError, PayloadOverflowError, OverlappingTensorsError}
        assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_checkpoint({"w": np.array([np.nan], dtype=np.float32)}, {}, build_vocabulary(["a"]),
                             tmp_path / "c")


class TestPredictionCsv:
    def test_literal_format(self, tmp_path):
        v = build_vocabulary(["c0", "c1"])
        pm = PredictionMatrix(("img0",), np.array([[0.25, 0.75]]), v)
        write_predictions(pm, tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text() == "image_id,c0,c1\nimg0,0.25,0.75\n"
        back = read_predictions(tmp_path / "p.csv", v)
        assert back.image_ids == ("img0",)
        assert np.array_equal(back.scores, pm.scores)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_round_trip_random(self, tmp_path_factory, n, c, seed):
        scores = np.random.default_rng(seed).random((n, c))
        v = build_vocabulary([f"k{i}" for i in range(c)])
        pm = PredictionMatrix(tuple(f"i{i}" for i in range(n)), scores, v)
        path = tmp_path_factory.mktemp("p") / "p.csv"
        write_predictions(pm, path)
        back = read_predictions(path, v)
        assert np.max(np.abs(back.scores - scores)) <= 1e-9
        # 17 significant digits are lossless for doubles
        assert np.array_equal(back.scores, scores)

    def test_out_of_range(self, tmp_path):
        (tmp_path / "p.csv").write_text("image_id,c0,c1\nimg0,1.2,0.5\n")
        with pytest.raises(ValidationError, match="score out of range"):
            read_predictions(tmp_path / "p.csv", build_vocabulary(["c0", "c1"]))

    def test_reordered_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("image_id,c1,c0\nimg0,0.1,0.5\n")
        with pytest.raises(ValidationError, match="column order"):
            read_predictions(tmp_path / "p.csv", build_vocabulary(["c0", "c1"]))

    def test_missing_and_extra_columns_listed(self, tmp_path):
        (tmp_path / "p.csv").write_text("image_id,c0,zz\nimg0,0.1,0.5\n")
        with pytest.raises(ValidationError, match="missing columns: c1; extra columns: zz"):
            read_predictions(tmp_path / "p.csv", build_vocabulary(["c0", "c1"]))

    def test_matrix_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            PredictionMatrix(("a",), np.array([[1.5]]), build_vocabulary(["c"]))
