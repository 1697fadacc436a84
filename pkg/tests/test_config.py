import json

import pytest

from retrieval_lab.config import apply_overrides, config_to_json, load_config, parse_config
from retrieval_lab.validation import ConfigError


class TestParseConfig:
    def test_empty_object_fills_all_defaults(self):
        config = parse_config({})
        assert config["seed"] == 0
        assert config["world"]["kind"] == "spectral"
        assert config["world"]["num_docs"] == 256
        assert config["model"]["paradigm"] == "dr"
        assert config["model"]["steps"] == 5000
        assert config["experiment"]["kind"] == "single"
        assert config["experiment"]["K"] == 16
        assert config["budget"]["max_seconds"] is None

    def test_none_equals_empty(self):
        assert parse_config() == parse_config({})

    def test_partial_override_keeps_other_defaults(self):
        config = parse_config({"model": {"steps": 7}})
        assert config["model"]["steps"] == 7
        assert config["model"]["learning_rate"] == 0.3

    def test_zero_k_names_the_key(self):
        with pytest.raises(ConfigError, match=r"experiment\.K must be at least 2, got 0"):
            parse_config({"experiment": {"K": 0}})

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key bogus"):
            parse_config({"bogus": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match=r"unknown key model\.bogus"):
            parse_config({"model": {"bogus": 1}})

    def test_type_mismatch_names_the_key(self):
        with pytest.raises(ConfigError, match=r"model\.steps"):
            parse_config({"model": {"steps": "many"}})

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError, match=r"model\.steps"):
            parse_config({"model": {"steps": True}})

    def test_enum_violation_names_choices(self):
        with pytest.raises(ConfigError, match=r"model\.paradigm"):
            parse_config({"model": {"paradigm": "sparse"}})

    def test_nullable_fields_accept_null(self):
        config = parse_config({"model": {"projection_dim": None}})
        assert config["model"]["projection_dim"] is None

    def test_grid_fields_accept_lists(self):
        config = parse_config({"experiment": {"k_grid": [4, 16]}})
        assert config["experiment"]["k_grid"] == [4, 16]

    def test_round_trip_through_json(self):
        config = parse_config({"seed": 9, "model": {"paradigm": "gr_codebook", "steps": 11}})
        text = config_to_json(config)
        assert parse_config(json.loads(text)) == config


class TestLoadConfig:
    def test_reads_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text('{"seed": 5}', encoding="utf-8")
        assert load_config(path)["seed"] == 5

    def test_missing_file_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_malformed_json_is_a_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)


class TestApplyOverrides:
    def test_dotted_path_sets_nested_value(self):
        config = parse_config({})
        out = apply_overrides(config, ["model.steps=42"])
        assert out["model"]["steps"] == 42

    def test_json_coercion_for_lists(self):
        config = parse_config({})
        out = apply_overrides(config, ["experiment.k_grid=[2,4]"])
        assert out["experiment"]["k_grid"] == [2, 4]

    def test_strings_pass_through(self):
        config = parse_config({})
        out = apply_overrides(config, ["model.paradigm=gr_text"])
        assert out["model"]["paradigm"] == "gr_text"

    def test_unknown_key_rejected(self):
        config = parse_config({})
        with pytest.raises(ConfigError, match="unknown key"):
            apply_overrides(config, ["model.nope=1"])

    def test_constraint_still_checked(self):
        config = parse_config({})
        with pytest.raises(ConfigError, match=r"experiment\.K"):
            apply_overrides(config, ["experiment.K=0"])

    def test_missing_equals_sign_rejected(self):
        config = parse_config({})
        with pytest.raises(ConfigError):
            apply_overrides(config, ["model.steps"])
