"""Tests for the binary checkpoint format."""
import struct

import numpy as np
import pytest

from src.core.config import ModelConfig, TrainConfig
from src.core.exceptions import CheckpointFormatError
from src.core.vit import init_weights
from src.tools.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from src.tools.training import AdamMoments


def _checkpoint(with_moments: bool = True) -> Checkpoint:
    cfg = ModelConfig.tiny()
    weights = init_weights(cfg, seed=5).state_dict()
    moments = AdamMoments.zeros_like(weights)
    if with_moments:
        rng = np.random.default_rng(5)
        for name in weights:
            moments.first[name] += rng.normal(size=weights[name].shape)
            moments.second[name] += rng.uniform(size=weights[name].shape)
    rng_state = np.random.default_rng(11).bit_generator.state
    return Checkpoint(
        model_config=cfg,
        train_config=TrainConfig(seed=11, batch_size=4),
        weights=weights,
        adam_first=moments.first if with_moments else {},
        adam_second=moments.second if with_moments else {},
        step=17,
        rng_state=rng_state,
    )


# === Round Trip Tests ===


class TestRoundTrip:
    """Tests for save_checkpoint followed by load_checkpoint."""

    def test_buffers_are_bit_identical(self, tmp_path):
        original = _checkpoint()
        loaded = load_checkpoint(save_checkpoint(original, tmp_path / "a.ckpt"))
        for attr in ("weights", "adam_first", "adam_second"):
            source, restored = getattr(original, attr), getattr(loaded, attr)
            assert set(source) == set(restored)
            for name, array in source.items():
                assert restored[name].dtype == array.dtype
                assert np.array_equal(restored[name], array), f"{attr}/{name}"

    def test_header_fields(self, tmp_path):
        original = _checkpoint()
        loaded = load_checkpoint(save_checkpoint(original, tmp_path / "a.ckpt"))
        assert loaded.model_config == original.model_config
        assert loaded.train_config == original.train_config
        assert loaded.step == 17
        assert loaded.rng_state == original.rng_state

    def test_restored_rng_continues_the_stream(self, tmp_path):
        original = _checkpoint()
        loaded = load_checkpoint(save_checkpoint(original, tmp_path / "a.ckpt"))
        a = np.random.default_rng(0)
        a.bit_generator.state = original.rng_state
        b = np.random.default_rng(0)
        b.bit_generator.state = loaded.rng_state
        assert np.array_equal(a.permutation(50), b.permutation(50))

    def test_float32_buffers(self, tmp_path):
        original = _checkpoint(with_moments=False)
        original.weights = {k: v.astype(np.float32) for k, v in original.weights.items()}
        loaded = load_checkpoint(save_checkpoint(original, tmp_path / "a.ckpt"))
        assert loaded.weights["head.weight"].dtype == np.float32
        assert loaded.adam_first == {}

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(_checkpoint(), tmp_path / "a.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]

    def test_failed_write_removes_temp_file(self, tmp_path):
        """A buffer that cannot be encoded leaves the previous file and no temp file."""
        path = save_checkpoint(_checkpoint(), tmp_path / "a.ckpt")
        before = path.read_bytes()
        broken = _checkpoint()
        broken.adam_second = {k: v.astype(np.int64) for k, v in broken.adam_second.items()}
        with pytest.raises(CheckpointFormatError, match="unsupported dtype"):
            save_checkpoint(broken, path)
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]
        assert path.read_bytes() == before

    def test_overwrites_existing(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(_checkpoint(), path)
        later = _checkpoint()
        later.step = 18
        save_checkpoint(later, path)
        assert load_checkpoint(path).step == 18


# === Malformed File Tests ===


class TestMalformed:
    """Tests that every malformed file raises CheckpointFormatError."""

    @pytest.fixture
    def saved(self, tmp_path):
        return save_checkpoint(_checkpoint(), tmp_path / "good.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_truncated(self, saved, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_bytes(saved.read_bytes()[:-10])
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_truncated_inside_header(self, saved, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_bytes(saved.read_bytes()[:20])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_bad_magic(self, saved, tmp_path):
        path = tmp_path / "magic.ckpt"
        path.write_bytes(b"NOTACKPT" + saved.read_bytes()[len(MAGIC):])
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, saved, tmp_path):
        data = bytearray(saved.read_bytes())
        data[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", FORMAT_VERSION + 1)
        path = tmp_path / "version.ckpt"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_trailing_bytes(self, saved, tmp_path):
        path = tmp_path / "long.ckpt"
        path.write_bytes(saved.read_bytes() + b"\x00")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        broken = _checkpoint()
        broken.weights["head.weight"] = np.zeros((3, 3))
        path = save_checkpoint(broken, tmp_path / "shape.ckpt")
        with pytest.raises(CheckpointFormatError, match="shape mismatch"):
            load_checkpoint(path)

    def test_missing_buffer(self, tmp_path):
        broken = _checkpoint()
        del broken.weights["head.bias"]
        path = save_checkpoint(broken, tmp_path / "missing.ckpt")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)
