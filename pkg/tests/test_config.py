import json

import pytest

from strata.config import ConfigError, PipelineConfig, block_hash, example_config


def test_defaults_validate():
    cfg = PipelineConfig.from_dict({})
    assert cfg.seed == 0
    assert cfg.quotas().procedures == 500
    assert cfg.benchmark().folds == 10


def test_example_config_is_valid():
    cfg = PipelineConfig.from_dict(example_config())
    assert cfg.synth().n_participants == 4000


@pytest.mark.parametrize("raw, field", [
    ({"bogus": 1}, "bogus"),
    ({"selection": {"quotas": {"devices": 3}}}, "devices"),
    ({"seed": -1}, "seed"),
    ({"synth": {"seed": 3}}, "synth.seed"),
    ({"model": {"seed": 3}}, "model.seed"),
    ({"model": {"max_depth": 0}}, "model"),
    ({"tuning": {"space": {"depth": {"kind": "int_uniform", "low": 1, "high": 3}}}},
     "tuning.space.depth"),
    ({"evaluation": {"folds": 1}}, "evaluation.folds"),
    ({"featurize": {"sentinel": 10}}, "featurize.sentinel"),
    ({"synth": {"n_participants": 0}}, "synth"),
    ({"selection": {"attribution": "lime"}}, "selection.attribution"),
])
def test_invalid_fields_are_named(raw, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        PipelineConfig.from_dict(raw)


def test_load_errors(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{ not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        PipelineConfig.load(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        PipelineConfig.load(tmp_path / "missing.json")
    bad.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        PipelineConfig.load(bad)


def test_overrides_and_seed_streams():
    cfg = PipelineConfig.from_dict({"seed": 3})
    other = cfg.with_overrides(seed=4, output="x", paper_mode=True)
    assert other.seed == 4 and other.raw["paths"]["output"] == "x"
    assert other.raw["selection"]["paper_mode"] is True
    assert cfg.raw["paths"]["output"] == "strata-out"
    assert cfg.synth().seed != other.synth().seed
    assert cfg.model_params().seed != cfg.model_params("selection", "select").seed


def test_block_hash_is_order_free():
    assert block_hash({"a": 1, "b": 2}) == block_hash({"b": 2, "a": 1})
    assert block_hash({"a": 1}) != block_hash({"a": 2})


def test_shipped_example_config_matches_builder():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "example.json"
    assert PipelineConfig.load(path).to_dict() == PipelineConfig.from_dict(example_config()).to_dict()
