"""
Tests for the encoder: configuration and presets, forward pass, gradient
check, input packing and the checkpoint format.
"""
import io
import struct

import numpy as np
import pytest

from clinical_lm.constants import CHECKPOINT_MAGIC
from clinical_lm.errors import CheckpointError, ConfigError, ShapeError, VocabularyError
from clinical_lm.model import (
    ModelConfig,
    build_encoder,
    count_params,
    forward,
    load_checkpoint,
    nearest_preset,
    param_shapes,
    preset_config,
    save_checkpoint,
)
from clinical_lm.model.checkpoint import read_checkpoint, write_checkpoint
from clinical_lm.model.config import model_config_from_run, reference_params
from clinical_lm.model.inputs import CLS_ID, PAD_ID, SEP_ID, pack_pair, pack_single, pad_batch
from clinical_lm.tensor import Tensor, matmul
from clinical_lm.tensor.gradcheck import check_gradients


@pytest.mark.unit
class TestModelConfig:
    def test_intermediate_defaults_to_four_times_hidden(self):
        assert ModelConfig(num_layers=1, hidden_size=8, num_heads=2).intermediate_size == 32

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_layers=1, hidden_size=10, num_heads=3)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_config("huge")

    def test_run_config_overrides_preset(self):
        cfg = model_config_from_run({"preset": "tiny", "num_layers": 2}, vocab_size=300)
        assert (cfg.num_layers, cfg.hidden_size, cfg.vocab_size) == (2, 128, 300)

    def test_nearest_preset(self):
        assert nearest_preset(preset_config("tiny")) == ("tiny", True)
        assert nearest_preset(ModelConfig(num_layers=4, hidden_size=160, num_heads=4)) == ("tiny", False)
        assert nearest_preset(ModelConfig(num_layers=24, hidden_size=1000, num_heads=8)) == ("base", False)


@pytest.mark.unit
class TestCountParams:
    def test_matches_built_tensors(self, tiny_config):
        built = sum(int(np.prod(shape)) for shape in param_shapes(tiny_config).values())
        assert count_params(tiny_config) == built

    @pytest.mark.parametrize("name,tolerance", [("base", 0.05), ("medium", 0.10), ("large", 0.10)])
    def test_preset_near_published_size(self, name, tolerance):
        cfg = preset_config(name, vocab_size=50000)
        reference = reference_params(name)
        assert abs(count_params(cfg) - reference) / reference < tolerance

    def test_grows_with_depth(self):
        small = preset_config("medium", vocab_size=50176)
        large = preset_config("large", vocab_size=50176)
        assert count_params(small) < count_params(large)


@pytest.mark.unit
class TestForward:
    def test_shapes(self, tiny_config):
        params = build_encoder(tiny_config, seed=0)
        out = forward(params, tiny_config, np.array([[2, 10, 11, 3], [2, 12, 3, 0]]),
                      attn_mask=np.array([[1, 1, 1, 1], [1, 1, 1, 0]]))
        assert out.hidden.shape == (2, 4, 16)
        assert out.pooled.shape == (2, 16)

    def test_same_seed_same_weights(self, tiny_config):
        a = build_encoder(tiny_config, seed=4)
        b = build_encoder(tiny_config, seed=4)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_padding_does_not_change_real_positions(self, tiny_config):
        params = build_encoder(tiny_config, seed=1)
        alone = forward(params, tiny_config, np.array([[2, 10, 11, 3]]))
        batch = pad_batch([[2, 10, 11, 3], [2, 12, 13, 14, 15, 16, 3]])
        padded = forward(params, tiny_config, batch.ids, batch.segment_ids, batch.attn_mask)
        np.testing.assert_allclose(padded.hidden.data[0, :4], alone.hidden.data[0], atol=1e-5)
        np.testing.assert_allclose(padded.pooled.data[0], alone.pooled.data[0], atol=1e-5)

    def test_rejects_long_sequence(self, tiny_config):
        params = build_encoder(tiny_config)
        with pytest.raises(ShapeError):
            forward(params, tiny_config, np.full((1, tiny_config.max_seq_len + 1), 10))

    def test_rejects_unknown_id(self, tiny_config):
        params = build_encoder(tiny_config)
        with pytest.raises(VocabularyError):
            forward(params, tiny_config, np.array([[2, tiny_config.vocab_size]]))

    def test_rejects_fully_masked_row(self, tiny_config):
        params = build_encoder(tiny_config)
        with pytest.raises(ShapeError):
            forward(params, tiny_config, np.array([[2, 3]]), attn_mask=np.array([[0, 0]]))

    def test_gradients_match_finite_differences(self, float64):
        cfg = preset_config("gradcheck", vocab_size=20)
        params = build_encoder(cfg, seed=0)
        rng = np.random.default_rng(0)
        for name, p in params.items():
            # wider weights than the init so no gradient is vanishingly small
            if name.endswith(".weight"):
                p.data = rng.normal(0.0, 0.3, size=p.shape)
        ids = np.array([[2, 9, 10, 11, 3, 0], [2, 12, 3, 13, 14, 3]])
        segments = np.array([[0, 0, 0, 0, 0, 0], [0, 0, 0, 1, 1, 1]])
        mask = np.array([[1, 1, 1, 1, 1, 0], [1, 1, 1, 1, 1, 1]])
        readout = Tensor(rng.normal(size=(cfg.hidden_size, 1)))

        def fn():
            out = forward(params, cfg, ids, segments, mask)
            return matmul(out.hidden, readout).sum() + out.pooled.sum()

        errors = check_gradients(fn, params, n_points=3)
        assert max(errors.values()) < 1e-4


@pytest.mark.unit
class TestInputs:
    def test_pack_single(self):
        packed = pack_single([10, 11, 12, 13], max_len=4)
        assert packed.ids == [CLS_ID, 10, 11, SEP_ID]
        assert packed.segment_ids == [0, 0, 0, 0]

    def test_pack_pair_truncates_longer_side(self):
        packed = pack_pair(list(range(10, 20)), [30, 31, 32], max_len=10)
        assert packed.ids == [CLS_ID, 10, 11, 12, 13, SEP_ID, 30, 31, 32, SEP_ID]
        assert packed.segment_ids == [0] * 6 + [1] * 4

    def test_pad_batch(self):
        batch = pad_batch([[2, 3], [2, 10, 3]], [[0, 0], [0, 1, 1]])
        assert batch.ids.tolist() == [[2, 3, PAD_ID], [2, 10, 3]]
        assert batch.attn_mask.tolist() == [[1, 1, 0], [1, 1, 1]]
        assert batch.segment_ids.tolist() == [[0, 0, 0], [0, 1, 1]]


@pytest.mark.unit
class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_config):
        params = build_encoder(tiny_config, seed=2)
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, tiny_config, params, {"seed": 2, "kind": "pretrained"})
        ckpt = load_checkpoint(path)
        assert ckpt.config == tiny_config
        assert ckpt.meta == {"seed": 2, "kind": "pretrained"}
        assert list(ckpt.params) == list(params)
        for name, p in params.items():
            np.testing.assert_array_equal(ckpt.params[name].data, p.data)

    def test_float64_stored_as_float32(self, float64, tiny_config):
        params = {"w": Tensor(np.array([[0.1, 0.2]]))}
        buf = io.BytesIO()
        write_checkpoint(buf, tiny_config, params)
        buf.seek(0)
        ckpt = read_checkpoint(buf, dtype=np.float64)
        assert ckpt.params["w"].dtype == np.float64
        np.testing.assert_allclose(ckpt.params["w"].data, [[0.1, 0.2]], rtol=1e-7)

    def _bytes(self, cfg):
        buf = io.BytesIO()
        write_checkpoint(buf, cfg, {"w": np.ones((2, 2), dtype=np.float32)})
        return buf.getvalue()

    def test_bad_magic(self, tiny_config):
        data = b"XXXX" + self._bytes(tiny_config)[4:]
        with pytest.raises(CheckpointError):
            read_checkpoint(io.BytesIO(data))

    def test_other_version_rejected(self, tiny_config):
        data = self._bytes(tiny_config)
        data = CHECKPOINT_MAGIC + struct.pack("<I", 2) + data[8:]
        with pytest.raises(CheckpointError, match="version 2"):
            read_checkpoint(io.BytesIO(data))

    def test_truncated(self, tiny_config):
        with pytest.raises(CheckpointError):
            read_checkpoint(io.BytesIO(self._bytes(tiny_config)[:-3]))

    def test_trailing_bytes(self, tiny_config):
        with pytest.raises(CheckpointError):
            read_checkpoint(io.BytesIO(self._bytes(tiny_config) + b"\x00"))
