import json

import pytest

from dovmeta.config import ConfigError, ExperimentConfig, load_config, save_config


def test_round_trip(tmp_path):
    cfg = ExperimentConfig().with_overrides(["lambda=0.5", 'env.family="point_goal"', "seed=4"])
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.lambda_ == 0.5 and back.env.family == "point_goal"
    assert "lambda" in json.loads((tmp_path / "c.json").read_text())["config"]


def test_overrides_parse_json_values():
    cfg = ExperimentConfig().with_overrides(["encoder_hidden=[16, 8]", "no_ema=true", 'env.holdout={"goal": [1]}'])
    assert cfg.encoder_hidden == [16, 8] and cfg.no_ema and cfg.env.holdout == {"goal": [1]}


@pytest.mark.parametrize("item", ["nokey", "bogus=1", "env.bogus=1", "alpha=1.5", "tau=1", "batch_size=0",
                                  "lambda=-1"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides([item])


def test_exclusive_baselines():
    with pytest.raises(ConfigError):
        ExperimentConfig(pearl_baseline=True, sac_baseline=True)


def test_mode_flags():
    assert ExperimentConfig(no_ema=True).effective_tau == 0.0
    pearl = ExperimentConfig(pearl_baseline=True)
    assert pearl.effective_lambda == 0.0 and pearl.effective_num_dovs(2) == 1 and pearl.agent_kind == "pearl"
    sac = ExperimentConfig(sac_baseline=True)
    assert sac.effective_num_dovs(2) == 0 and sac.agent_kind == "sac"
    assert ExperimentConfig().effective_num_dovs(2) == 2 and ExperimentConfig().agent_kind == "ours"


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_run_dir():
    assert str(ExperimentConfig(out_dir="x", seed=7).run_dir()) == "x/seed7"
