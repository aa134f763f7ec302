import json

import pytest

from motionft.config import ConfigError, RunConfig, apply_overrides, from_dict, load


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load(path) == cfg
    assert cfg.lora.rank == 4 and cfg.ddpo.cfg_scale == 2.5 and cfg.eval.pool == 32


@pytest.mark.parametrize("doc", [
    {"sed": 1},
    {"ddpo": {"leraning_rate": 1e-3}},
    {"reward": {"evaluator": {"widht": 3}}},
    {"paths": {"checkpoint": "x"}},
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigError, match="unknown config key"):
        from_dict(doc)


@pytest.mark.parametrize("doc", [{"seed": "1"}, {"seed": 1.5}, {"ddpo": {"lr": "fast"}}, {"data": "x"},
                                 {"ddpo": {"clip_eps": 0.0}}])
def test_bad_values_rejected(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_nested_partial_documents_keep_defaults():
    cfg = from_dict({"reward": {"evaluator": {"iters": 5}}, "ddpo": {"lr": 1}})
    assert cfg.reward.evaluator.iters == 5
    assert cfg.reward.evaluator.width == 192
    assert cfg.ddpo.lr == 1.0 and isinstance(cfg.ddpo.lr, float)


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["ddpo.lr=1e-4", "seed=3", "data.held_out=[\"spin-right\"]",
                                        "lora.targets=all", "paths.data=/tmp/d"])
    assert cfg.ddpo.lr == 1e-4 and cfg.seed == 3
    assert cfg.data.held_out == ["spin-right"] and cfg.lora.targets == "all"
    assert cfg.paths == {"data": "/tmp/d"}
    for bad in (["ddpo.nope=1"], ["nokey"], ["seed.x=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load(bad)


def test_echo_is_sorted_json():
    doc = json.loads(RunConfig().to_json())
    assert list(doc) == sorted(doc)
    assert from_dict(doc) == RunConfig()
