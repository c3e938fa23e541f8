import json

import numpy as np
import pytest

from ledetr.checkpoint import load_checkpoint, save_checkpoint
from ledetr.errors import ConfigError, ShapeError
from ledetr.model import LeDetr, ModelConfig
from ledetr.rng import Rng64
from ledetr.tensor import Tensor4, init_normal


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.scale == "M" and cfg.input_hw == (640, 640)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ModelConfig.from_json('{"scale": "M", "learning_rate": 0.1}')

    def test_bad_hw_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_hw=(100, 64))

    def test_bad_layers_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(inference_layers=7)

    def test_unknown_scale_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(scale="Q")

    def test_from_json(self):
        cfg = ModelConfig.from_json(
            '{"scale": "L", "input_hw": [320, 320], "inference_layers": 5, "seed": 3}'
        )
        assert cfg.scale == "L" and cfg.input_hw == (320, 320)
        assert cfg.inference_layers == 5 and cfg.seed == 3

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("LE_SEED", "99")
        cfg = ModelConfig.from_json('{"scale": "M", "seed": 3}')
        assert cfg.seed == 99

    def test_malformed_json(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_json("{nope")


@pytest.fixture(scope="module")
def model_160():
    return LeDetr.build(ModelConfig(scale="M", input_hw=(160, 160), seed=7))


@pytest.fixture(scope="module")
def image_160():
    return Tensor4(init_normal(Rng64(55), (1, 3, 160, 160), 1.0))


class TestForward:
    def test_detection_sets(self, model_160, image_160):
        sets = model_160.forward(image_160, n_layers=2)
        assert len(sets) == 2
        assert sets[0].boxes.shape == (300, 4)
        assert sets[0].logits.shape == (300, 80)
        assert np.all(sets[0].boxes > 0) and np.all(sets[0].boxes < 1)

    def test_batch_must_be_one(self, model_160):
        with pytest.raises(ShapeError):
            model_160.forward(Tensor4(np.zeros((2, 3, 160, 160), dtype=np.float32)))

    def test_thread_count_bit_identical(self, model_160, image_160):
        a = model_160.forward(image_160, n_layers=2, threads=1)
        b = model_160.forward(image_160, n_layers=2, threads=4)
        for da, db in zip(a, b):
            assert np.array_equal(da.boxes, db.boxes)
            assert np.array_equal(da.logits, db.logits)

    def test_repeat_run_deterministic(self, model_160, image_160):
        a = model_160.forward(image_160, n_layers=1)
        b = model_160.forward(image_160, n_layers=1)
        assert np.array_equal(a[0].logits, b[0].logits)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, model_160):
        out = str(tmp_path / "ckpt")
        save_checkpoint(out, model_160.named_params())
        back = load_checkpoint(out)
        orig = dict(model_160.named_params())
        assert back.keys() == orig.keys()
        for name in orig:
            assert back[name].shape == orig[name].shape
            assert np.array_equal(back[name], orig[name]), name

    def test_same_seed_byte_identical_files(self, tmp_path):
        cfg = ModelConfig(scale="M", input_hw=(64, 64), seed=7)
        pa, pb = str(tmp_path / "a"), str(tmp_path / "b")
        save_checkpoint(pa, LeDetr.build(cfg).named_params())
        save_checkpoint(pb, LeDetr.build(cfg).named_params())
        for fname in ("weights.bin", "manifest.txt"):
            a = (tmp_path / "a" / fname).read_bytes()
            b = (tmp_path / "b" / fname).read_bytes()
            assert a == b, fname

    def test_different_seed_differs(self, tmp_path):
        pa, pb = str(tmp_path / "a"), str(tmp_path / "b")
        save_checkpoint(pa, LeDetr.build(ModelConfig(scale="M", input_hw=(64, 64), seed=7)).named_params())
        save_checkpoint(pb, LeDetr.build(ModelConfig(scale="M", input_hw=(64, 64), seed=8)).named_params())
        assert (tmp_path / "a" / "weights.bin").read_bytes() != (tmp_path / "b" / "weights.bin").read_bytes()
