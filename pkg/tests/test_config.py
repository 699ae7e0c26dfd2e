import json

import pytest

from hoshape.config import ConfigError, RunConfig, load_config, set_dotted


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = RunConfig().validate()
    assert cfg.patch_spec.patch_resolution * cfg.patch_spec.patches_per_axis == cfg.grid_spec.resolution
    cfg.save(tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()


def test_partial_nested_sections_merge(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"ae_hand": {"steps": 7}, "metrics": {"n_samples": 100}}))
    cfg = load_config(p)
    assert cfg.ae_hand.steps == 7
    assert cfg.ae_hand.num_codes == RunConfig().ae_hand.num_codes
    assert cfg.metrics.n_samples == 100 and cfg.metrics.seed == RunConfig().metrics.seed


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"toy_train": 5, "evaluation": {"repetitions": 2}}))
    cfg = load_config(p, {"toy_train": 9, "evaluation.repetitions": 1})
    assert cfg.toy_train == 9 and cfg.evaluation.repetitions == 1


@pytest.mark.parametrize("bad", [
    {"toy_trian": 3},
    {"ae_hand": {"stepz": 3}},
    {"device": "cuda"},
    {"schema_version": 99},
    {"dataset_format": "coco"},
    {"patches_per_axis": 5},
    {"evaluation": {"repetitions": 0}},
    {"evaluation": {"view_counts": [4, 1]}},
    {"ae_object": {"lr_schedule": "step"}},
    {"ae_hand": {"decoder_frequencies": -1}},
    {"predictor": 3},
])
def test_invalid_configs(tmp_path, bad):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        load_config(p)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_set_dotted():
    d = {"a": 1}
    set_dotted(d, "b.c", 2)
    assert d == {"a": 1, "b": {"c": 2}}
    with pytest.raises(ConfigError):
        set_dotted(d, "a.x", 3)
