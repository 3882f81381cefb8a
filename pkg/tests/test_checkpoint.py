import numpy as np
import pytest

from mfclust.checkpoint import (
    config_from_text,
    config_to_text,
    load_checkpoint,
    save_checkpoint,
)
from mfclust.distributions import LikelihoodModel
from mfclust.model import ModelConfig, MultiFacetVAE

from test_model import make_model, rand_batch


def test_config_text_round_trip():
    cfg = ModelConfig(J=2, input_dim=784, z_dims=(5, 5), K=(25, 25),
                      backbone_widths=(500, 2000), architecture="ladder",
                      likelihood=LikelihoodModel("gaussian_fixed_sigma", sigma=0.3),
                      cov_mode="full", pi_trainable=False,
                      fade_in_batches=2000, activation="elu")
    assert config_from_text(config_to_text(cfg)) == cfg


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = make_model(cov_mode="full", seed=5)
    path = tmp_path / "model.mfcv"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    for name, arr in model.parameters().items():
        assert loaded.parameters()[name].tobytes() == arr.tobytes()

    # saved again, the file is byte-identical
    path2 = tmp_path / "model2.mfcv"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_preserves_behaviour(tmp_path):
    model = make_model(seed=6)
    x = rand_batch(model, n=3, seed=7)
    path = tmp_path / "model.mfcv"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.reconstruct(x), model.reconstruct(x))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.mfcv"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model = make_model(seed=8)
    path = tmp_path / "model.mfcv"
    save_checkpoint(path, model)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ValueError, match="truncated|missing"):
        load_checkpoint(path)


def test_checkpoint_unsupported_version(tmp_path):
    model = make_model(seed=9)
    path = tmp_path / "model.mfcv"
    save_checkpoint(path, model)
    data = bytearray(path.read_bytes())
    data[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
