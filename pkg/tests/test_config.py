import json

import pytest

from glam.config import PRESETS, GlamConfig, TrainConfig, desk_config, load_config, smoke_config
from glam.global_net import ConfigError
from conftest import tiny_config


def test_json_round_trip():
    cfg = tiny_config()
    back = GlamConfig.from_json(json.loads(cfg.dumps()))
    assert back == cfg and back.digest() == cfg.digest()


def test_lambda_key():
    data = tiny_config().to_json()
    assert "lambda" in data["train"] and "lam" not in data["train"]


def test_digest_tracks_content():
    a = tiny_config()
    assert a.digest() == tiny_config().digest()
    assert a.digest() != tiny_config(seed=5).digest()


def test_partial_file_uses_defaults(tmp_path):
    cfg = smoke_config().to_json()
    del cfg["train"]["beta1"]
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert load_config(tmp_path / "c.json") == smoke_config()


@pytest.mark.parametrize("edit,match", [
    (lambda d: d.update(extra=1), "unknown config sections"),
    (lambda d: d["train"].update(learning_rate=1), "unknown keys"),
    (lambda d: d["train"].update(eta=-1.0), "eta"),
    (lambda d: d["train"].update(K=0), "K"),
    (lambda d: d["train"].update(negative_sampling="hard"), "negative_sampling"),
    (lambda d: d["synth"].update(height=128), "do not match"),
    (lambda d: d["global"].update(gamma=0.5), "must be a list"),
    (lambda d: d.update(gamma_c=2.0), "gamma_c"),
])
def test_invalid(tmp_path, edit, match):
    data = tiny_config().to_json()
    edit(data)
    (tmp_path / "c.json").write_text(json.dumps(data))
    with pytest.raises(ConfigError, match=match):
        load_config(tmp_path / "c.json")


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{ nope")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(tmp_path / "c.json")


def test_presets_valid():
    for name, make in PRESETS.items():
        make().validate()
    desk = desk_config()
    assert desk.image_dims == (768, 512) and desk.local.patch_px == (128, 128)
    assert desk.train.K == 6 and desk.train.M == 1 and desk.local.t_local == 20
    assert (desk.synth.n_train, desk.synth.n_val, desk.synth.n_test) == (600, 150, 150)


def test_train_defaults():
    t = TrainConfig()
    assert (t.K, t.M, t.epochs_global, t.epochs_local, t.epochs_joint) == (6, 1, 50, 20, 5)
    assert t.negative_sampling == "random_negatives"
