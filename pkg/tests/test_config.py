import json

import pytest

from ccem.config import DESK_PRESET, ENV_PRESETS, ConfigError, ExperimentConfig, load_config
from ccem.planner import Scoring


def test_defaults_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_presets_apply_in_order():
    cfg = load_config(None, {**ENV_PRESETS["pointmass-sparse"], **DESK_PRESET})
    assert cfg.env.action_repeat == 4 and cfg.model.dtype == "float32"
    assert cfg.seeds == tuple(range(10)) and cfg.model.hidden_dims == (64, 64)


def test_unknown_key_names_the_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "cem.population": 64,\n  "cem.populaton": 3\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:3: unknown config key 'cem\.populaton'"):
        load_config(path)


def test_bad_type_names_the_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "train.batch_size": "lots"\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:2: bad value for 'train\.batch_size'"):
        load_config(path)


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "cem.population": 64,\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:3: invalid JSON"):
        load_config(path)


@pytest.mark.parametrize(
    "flat",
    [
        {"cem.elites": 1000},
        {"train.batch_size": 0},
        {"env.episode_length": 999},
        {"train.traj_len": 5000},
        {"cem.scoring": "best_guess"},
    ],
)
def test_invalid_values_rejected(flat):
    with pytest.raises(ConfigError):
        load_config(None, flat)


def test_string_overrides_are_coerced():
    cfg = load_config(None, {"cem.population": "128", "train.non_ccem": "true", "model.hidden_dims": "32,32", "seeds": "1,2"})
    assert cfg.cem.population == 128 and cfg.train.non_ccem is True
    assert cfg.model.hidden_dims == (32, 32) and cfg.seeds == (1, 2)


def test_variants():
    cfg = ExperimentConfig()
    assert cfg.variant("full").train.non_contrastive is False
    nc = cfg.variant("non_contrastive")
    assert nc.train.non_contrastive and not nc.train.non_ccem and nc.cem.scoring is cfg.cem.scoring
    base = cfg.variant("baseline")
    assert base.train.non_contrastive and base.train.non_ccem and base.cem.scoring is Scoring.SUM_REWARDS
    with pytest.raises(ConfigError):
        cfg.variant("nope")


def test_saved_config_is_sorted_json(tmp_path):
    ExperimentConfig().save(tmp_path / "c.json")
    data = json.loads((tmp_path / "c.json").read_text())
    assert list(data) == sorted(data)
