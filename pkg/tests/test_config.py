import json

import pytest

from usflow.config import ConfigError, RunConfig, apply_overrides, build_strict, load_run_config


def test_defaults_materialize():
    d = RunConfig().to_dict()
    assert d["loss"]["gamma"] == 0.2 and d["train"]["epochs"] == 20
    assert d["simulate"]["grid"]["axial_samples"] == 1024
    assert build_strict(RunConfig, d) == RunConfig()


def test_round_trip(tmp_path):
    cfg = load_run_config(None, ["train.epochs=3", "loss.mask_mode=literal", "simulate.grid.lateral_lines=32"], seed=9)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert load_run_config(p) == cfg
    assert cfg.seed == 9 and cfg.train.epochs == 3 and cfg.loss.mask_mode == "literal"


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown keys"):
        load_run_config(None, ["train.epoch=3"])
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"loss": {"gamma": 0.2, "beta": 1}}))
    with pytest.raises(ConfigError, match=r"loss: unknown keys \['beta'\]"):
        load_run_config(p)


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ConfigError, match="gamma"):
        load_run_config(None, ["loss.gamma=2"])
    with pytest.raises(ConfigError, match="expected an object"):
        load_run_config(None, ["loss=3"])
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(p)
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        apply_overrides({}, ["train.epochs"])


def test_override_values_parse_as_json():
    doc = apply_overrides({"a": {"b": 1}}, ["a.b=[1, 2]", "a.c=text", "d=true"])
    assert doc == {"a": {"b": [1, 2], "c": "text"}, "d": True}


def test_solve_config_carries_loss():
    cfg = load_run_config(None, ["loss.lambda3=0", "solve.iterations=5"])
    s = cfg.solve_config()
    assert s.loss.lambda3 == 0 and s.iterations == 5 and isinstance(s.levels, tuple)
