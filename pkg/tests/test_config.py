import json

import pytest

from scasnet.config import EvalConfig, RunConfig, desk_profile, load_config, paper_profile, profile
from scasnet.model import ConfigError


def test_desk_profile_defaults():
    cfg = load_config()
    assert cfg.model.dilation_rates == [4, 3, 2, 1]
    assert cfg.data.patch_size == 64 and cfg.train.batch_size == 4 and cfg.train.epochs == 300
    assert cfg.infer.scales == [0.5, 1.0, 1.5]
    assert cfg.eval.radius == 3
    assert (cfg.data.train_scenes, cfg.data.val_scenes, cfg.data.test_scenes) == (64, 16, 16)


def test_paper_profile_settings():
    cfg = paper_profile()
    assert cfg.data.patch_size == 400 and cfg.data.overlap == 100
    assert cfg.train.lr0 == 0.01 and cfg.train.batch_size == 4 and cfg.train.epochs == 80
    assert cfg.train.lr_drop_every == 20 and cfg.train.lr_drop_factor == 0.1
    assert cfg.model.dilation_rates == [24, 18, 12, 6]
    cfg.validate()


def test_profile_lookup():
    assert profile("desk") == desk_profile()
    with pytest.raises(ConfigError):
        profile("laptop")


def test_roundtrip():
    cfg = desk_profile()
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_overlay(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 3}, "model": {"dropout": 0.25}}))
    cfg = load_config(p)
    assert cfg.train.epochs == 3 and cfg.model.dropout == 0.25
    assert cfg.train.lr0 == desk_profile().train.lr0


@pytest.mark.parametrize("doc", [
    {"trian": {}},
    {"train": {"epoch": 3}},
    {"model": {"stages": [{"convs": 1, "width": 4, "pool": True, "extra": 1}]}},
    {"eval": {"radius": -1}},
    {"data": {"patch_size": 60}},
    {"train": 5},
    [1, 2],
])
def test_rejected(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_config(p)


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_with_seed():
    cfg = desk_profile().with_seed(9)
    assert cfg.train.seed == 9 and cfg.data.seed == 9
    assert desk_profile().train.seed == 0


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(split="holdout").validate()
