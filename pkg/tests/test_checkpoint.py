import struct
import zlib

import numpy as np
import pytest

from prunemerge.checkpoint import (MAGIC, load_arrays, load_model, load_plan,
                                   save_arrays, save_model, save_plan)
from prunemerge.compression import compress_model, global_plan
from prunemerge.errors import (CheckpointError, ContractError,
                               UnsupportedVersionError)
from prunemerge.vit import ModelConfig, VisionTransformer


@pytest.fixture
def sample_arrays():
    rng = np.random.default_rng(17)
    return {
        "weights": rng.standard_normal((3, 4)),
        "counts": np.arange(6, dtype=np.int64).reshape(2, 3),
        "mask": np.array([1, 0, 1], dtype=np.uint8),
        "scalar": np.array(42, dtype=np.int64),
        "empty_axis": np.zeros((0, 5)),
    }


class TestArrayRoundTrip:
    def test_bit_identical(self, tmp_path, sample_arrays):
        path = tmp_path / "arrays.pmvt"
        save_arrays(path, sample_arrays)
        back = load_arrays(path)
        assert set(back) == set(sample_arrays)
        for name, original in sample_arrays.items():
            assert back[name].dtype == original.dtype
            assert back[name].shape == original.shape
            assert back[name].tobytes() == original.tobytes()

    def test_byte_stable_across_saves(self, tmp_path, sample_arrays):
        p1, p2 = tmp_path / "a.pmvt", tmp_path / "b.pmvt"
        save_arrays(p1, sample_arrays)
        save_arrays(p2, sample_arrays)
        assert p1.read_bytes() == p2.read_bytes()

    def test_scalar_stays_zero_dimensional(self, tmp_path):
        path = tmp_path / "s.pmvt"
        save_arrays(path, {"x": np.array(7, dtype=np.int64)})
        assert load_arrays(path)["x"].shape == ()

    def test_noncontiguous_input(self, tmp_path):
        base = np.arange(24, dtype=np.float64).reshape(4, 6)
        view = base[:, ::2]
        path = tmp_path / "v.pmvt"
        save_arrays(path, {"v": view})
        np.testing.assert_array_equal(load_arrays(path)["v"], view)

    def test_unsupported_dtype_rejected(self, tmp_path):
        for bad in (np.zeros(3, dtype=np.float32),
                    np.zeros(3, dtype=np.int32),
                    np.zeros(3, dtype=bool)):
            with pytest.raises(CheckpointError):
                save_arrays(tmp_path / "bad.pmvt", {"x": bad})

    def test_empty_name_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_arrays(tmp_path / "bad.pmvt", {"": np.zeros(1)})


class TestContainerValidation:
    def write_valid(self, path):
        save_arrays(path, {"x": np.arange(4, dtype=np.int64)})
        return bytearray(path.read_bytes())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.pmvt"
        blob = self.write_valid(path)
        blob[:4] = b"NOPE"
        path.write_bytes(blob)
        with pytest.raises(CheckpointError, match="magic"):
            load_arrays(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "f.pmvt"
        blob = self.write_valid(path)
        blob[4:8] = struct.pack("<I", 99)
        # keep the CRC honest so only the version triggers
        body = bytes(blob[:-4])
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(UnsupportedVersionError, match="99"):
            load_arrays(path)

    def test_crc_corruption_detected(self, tmp_path):
        path = tmp_path / "f.pmvt"
        blob = self.write_valid(path)
        blob[-6] ^= 0xFF  # flip payload bits, keep stored CRC
        path.write_bytes(blob)
        with pytest.raises(CheckpointError, match="CRC"):
            load_arrays(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "f.pmvt"
        blob = self.write_valid(path)
        path.write_bytes(bytes(blob[:10]))
        with pytest.raises(CheckpointError, match="short"):
            load_arrays(path)

    def test_magic_constant(self):
        assert MAGIC == b"PMVT"


def small_model():
    config = ModelConfig(image_size=8, patch_size=4, channels=1,
                         embed_dim=8, depth=2, heads=2, num_classes=4)
    return VisionTransformer.build(config, seed=23)


class TestModelCodec:
    def test_base_model_round_trip(self, tmp_path):
        model = small_model()
        path = tmp_path / "model.pmvt"
        save_model(path, model)
        back, extra = load_model(path)
        assert isinstance(back, VisionTransformer)
        assert back.config == model.config
        assert extra == {}
        for (name, a), (_, b) in zip(model.named_parameters(),
                                     back.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        rng = np.random.default_rng(0)
        images = rng.uniform(0, 1, size=(2, 1, 8, 8))
        np.testing.assert_array_equal(model.forward(images).data,
                                      back.forward(images).data)

    def test_compressed_model_round_trip(self, tmp_path):
        model = small_model()
        rng = np.random.default_rng(1)
        scores = [rng.uniform(0.1, 1, size=model.config.num_tokens)
                  for _ in range(2)]
        plan = global_plan(scores, rate=0.6, pm_threshold=0.2)
        comp = compress_model(model, plan, learnable_matrices=True)
        comp.merge_t[0].data[1, :] *= 1.25  # simulate training drift
        path = tmp_path / "comp.pmvt"
        save_model(path, comp)
        back, _ = load_model(path)
        np.testing.assert_array_equal(back.merge_t[0].data,
                                      comp.merge_t[0].data)
        images = rng.uniform(0, 1, size=(2, 1, 8, 8))
        np.testing.assert_array_equal(comp.forward(images).data,
                                      back.forward(images).data)

    def test_extra_arrays_travel_alongside(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.pmvt"
        save_model(path, model, extra={"note": np.array(5, dtype=np.int64)})
        _, extra = load_model(path)
        assert int(extra["note"]) == 5

    def test_extra_name_collision_rejected(self, tmp_path):
        model = small_model()
        with pytest.raises(CheckpointError):
            save_model(tmp_path / "m.pmvt", model,
                       extra={"param.head.w": np.zeros(2)})

    def test_wrong_object_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            save_model(tmp_path / "m.pmvt", object())

    def test_plan_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        scores = [rng.uniform(0.1, 1, size=9) for _ in range(3)]
        plan = global_plan(scores, rate=0.5, pm_threshold=0.2,
                           exempt_layers=(0,))
        path = tmp_path / "plan.pmvt"
        save_plan(path, plan)
        back = load_plan(path)
        assert back.uncompressed == frozenset({0})
        for ea, eb in zip(plan.entries, back.entries):
            if ea is None:
                assert eb is None
                continue
            np.testing.assert_array_equal(ea.merge.data, eb.merge.data)
            np.testing.assert_array_equal(ea.mask, eb.mask)
