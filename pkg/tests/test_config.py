"""Config loading, inheritance, and variant-constraint validation."""

import json

import pytest

from speechlm.config import (
    ExperimentConfig,
    LoraSection,
    VARIANTS,
    config_from_dict,
    load_config,
    validate_variant,
    variant_settings,
)
from speechlm.errors import ConfigError


def test_defaults_load():
    cfg = load_config(None)
    assert cfg.decoding.beam == 4  # default beam size
    assert cfg.lora.rank == 2
    assert cfg.training.batch_size == 16


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"data": {"bogus_field": 1}})
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"not_a_section": {}})


def test_extends_inheritance(tmp_path):
    base = tmp_path / "base.json"
    base.write_text(json.dumps({"seed": 1, "training": {"batch_size": 8, "lm_steps": 44}}))
    child = tmp_path / "child.json"
    child.write_text(json.dumps({"extends": "base.json",
                                 "training": {"batch_size": 4}}))
    cfg = load_config(child)
    assert cfg.seed == 1
    assert cfg.training.batch_size == 4  # overridden
    assert cfg.training.lm_steps == 44  # inherited


def test_extends_cycle_detected(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps({"extends": "b.json"}))
    b.write_text(json.dumps({"extends": "a.json"}))
    with pytest.raises(ConfigError, match="cycle"):
        load_config(a)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{oops")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


def test_all_variants_validate_under_defaults():
    cfg = ExperimentConfig()
    for variant in VARIANTS:
        validate_variant(cfg, variant)


def test_unknown_variant():
    with pytest.raises(ConfigError, match="unknown variant"):
        validate_variant(ExperimentConfig(), "E9")


def test_lora_variant_requires_lora_enabled():
    cfg = ExperimentConfig(lora=LoraSection(enabled=False))
    with pytest.raises(ConfigError, match="lora.enabled"):
        validate_variant(cfg, "E3")
    with pytest.raises(ConfigError, match="lora.enabled"):
        validate_variant(cfg, "E5")
    validate_variant(cfg, "E2")  # non-adapter variants unaffected


def test_variant_settings_matrix():
    assert variant_settings("E1")["compression"] == "blank_remove"
    for v in ("E2", "E3", "E4", "E5"):
        assert variant_settings(v)["compression"] == "frame_average"
    assert variant_settings("E0")["frontend"] == "conv"
    for v in ("E4", "E5"):
        assert variant_settings(v)["mask"] == "prefix"
    for v in ("E0", "E1", "E2", "E3"):
        assert variant_settings(v)["mask"] == "causal"
    assert variant_settings("E3")["base"] == "E2"
    assert variant_settings("E5")["base"] == "E4"


def test_config_hash_stable_and_sensitive():
    a = ExperimentConfig()
    b = ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    c = ExperimentConfig(seed=999)
    assert a.config_hash() != c.config_hash()


def test_tuple_coercion_from_json_lists():
    cfg = config_from_dict({"data": {"duration_range": [5, 9]}})
    assert cfg.data.duration_range == (5, 9)
