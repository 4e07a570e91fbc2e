import json

import pytest

from ragdp.config import ExperimentConfig, apply_overrides, load_config, parse_override


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.k, cfg.v) == (80, 20)
    assert cfg.dp.expected_batch == 64
    assert cfg.eval.nn_size == 5
    assert cfg.schedule.T == 100


def test_json_round_trip_and_digest():
    cfg = load_config(overrides=["dp.iterations=7", "data.params.radius=3.5"], seed=4)
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert cfg.dp.iterations == 7 and cfg.data.params["radius"] == 3.5 and cfg.seed == 4
    assert ExperimentConfig().digest() != cfg.digest()


def test_file_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dp": {"noise_scale": 2.0}, "data": {"params": {"n_modes": 4}}}))
    cfg = load_config(path, ["dp.iterations=3"])
    assert cfg.dp.noise_scale == 2.0 and cfg.dp.iterations == 3
    assert cfg.dp.clip_norm == 1.0
    assert cfg.data.params == {"n_modes": 4}


def test_parse_override_values():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=null") == (["a"], None)
    assert parse_override("a=text") == (["a"], "text")
    assert parse_override("a=[1, 2]") == (["a"], [1, 2])
    with pytest.raises(ValueError):
        parse_override("novalue")


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(KeyError):
        load_config(overrides=["dp.sigma=1"])
    with pytest.raises(KeyError):
        apply_overrides({"a": 1}, ["a.b=2"])
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(KeyError):
        load_config(path)


def test_fraction_validation():
    with pytest.raises(ValueError):
        load_config(overrides=["k_frac=0.2", "v_frac=0.3"])


def test_stage_seeds_distinct_and_stable():
    cfg = ExperimentConfig(seed=1)
    seeds = {cfg.stage_seed(s) for s in ("data", "pretrain", "dp-finetune")}
    assert len(seeds) == 3
    assert cfg.stage_seed("data") == ExperimentConfig(seed=1).stage_seed("data")
    assert cfg.stage_seed("data") != ExperimentConfig(seed=2).stage_seed("data")
