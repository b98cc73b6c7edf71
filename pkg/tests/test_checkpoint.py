import numpy as np
import pytest

from qarv.checkpoint import (FORMAT_VERSION, MAGIC, CheckpointError,
                             load_arrays, save_arrays)
from qarv.model import (ModelConfig, QarvModel, apply_ema_weights,
                        load_checkpoint, save_checkpoint)
from qarv.optim import Adam, EmaTracker

SMALL = ModelConfig(divisors=(8, 4), latent_channels=(4, 4), block_repeats=(1, 1),
                    feature_channels=(12, 8), enc_blocks=1, posterior_blocks=1,
                    embed_freqs=4, embed_hidden=8, embed_dim=8)


class TestArrayStore:
    def test_round_trip_all_dtypes(self, tmp_path):
        path = str(tmp_path / "a.qarvckpt")
        arrays = {
            "f32": np.arange(6, dtype=np.float32).reshape(2, 3),
            "f64": np.linspace(0, 1, 5),
            "bytes": np.frombuffer(b"hello", dtype=np.uint8),
            "scalar": np.asarray(7, dtype=np.int64),
        }
        save_arrays(path, arrays)
        back = load_arrays(path)
        assert set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
            assert back[k].dtype == arrays[k].dtype

    def test_magic_and_version_present(self, tmp_path):
        path = str(tmp_path / "b.qarvckpt")
        save_arrays(path, {"x": np.zeros(1, dtype=np.float32)})
        blob = open(path, "rb").read()
        assert blob.startswith(MAGIC)
        assert int.from_bytes(blob[8:10], "little") == FORMAT_VERSION

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "c.bin")
        with open(path, "wb") as f:
            f.write(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_arrays(path)

    def test_truncation_rejected(self, tmp_path):
        path = str(tmp_path / "d.qarvckpt")
        save_arrays(path, {"x": np.zeros(100, dtype=np.float32)})
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[:-10])
        with pytest.raises(CheckpointError):
            load_arrays(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_arrays(str(tmp_path / "e.qarvckpt"),
                        {"x": np.zeros(3, dtype=np.int32)})


class TestModelCheckpoint:
    def test_params_round_trip(self, tmp_path):
        path = str(tmp_path / "m.qarvckpt")
        model = QarvModel(SMALL, seed=3)
        save_checkpoint(model, path)
        back, extras = load_checkpoint(path)
        assert back.config == model.config
        assert not extras
        for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                      back.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_ema_and_optimizer_records(self, tmp_path):
        path = str(tmp_path / "m2.qarvckpt")
        model = QarvModel(SMALL, seed=3)
        params = model.parameters()
        opt = Adam(params, lr=1e-3)
        ema = EmaTracker(params, decay=0.99)
        for p in params:
            p.grad = np.full(p.shape, 0.1, dtype=np.float32)
        opt.step()
        ema.update()
        save_checkpoint(model, path, optimizer=opt, ema=ema)
        back, extras = load_checkpoint(path)
        names = [n for n, _ in model.named_parameters()]
        assert all(f"{n}/ema" in extras for n in names)
        assert all(f"{n}/adam_m" in extras for n in names)
        assert int(extras["__step__"].item()) == 1
        np.testing.assert_array_equal(extras[names[0] + "/ema"], ema.shadow[0])

    def test_apply_ema_weights(self, tmp_path):
        path = str(tmp_path / "m3.qarvckpt")
        model = QarvModel(SMALL, seed=3)
        params = model.parameters()
        ema = EmaTracker(params, decay=0.5)
        for p in params:
            p.data = p.data + 1.0
        ema.update()
        save_checkpoint(model, path, ema=ema)
        back, extras = load_checkpoint(path)
        apply_ema_weights(back, extras)
        np.testing.assert_allclose(back.parameters()[0].data, ema.shadow[0])

    def test_missing_parameter_rejected(self, tmp_path):
        path = str(tmp_path / "m4.qarvckpt")
        model = QarvModel(SMALL, seed=3)
        arrays = {"__config__": np.frombuffer(model.config.to_json().encode(),
                                              dtype=np.uint8)}
        save_arrays(path, arrays)
        with pytest.raises(Exception):
            load_checkpoint(path)

    def test_config_survives_json_round_trip(self):
        cfg = ModelConfig()
        assert ModelConfig.from_json(cfg.to_json()) == cfg
        assert len(cfg.config_hash()) == 8
        other = ModelConfig(block_config="A")
        assert other.config_hash() != cfg.config_hash()
