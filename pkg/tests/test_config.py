import json

import pytest

from dgsl.config import SEED_ENV, ConfigError, ExperimentConfig, apply_seed_override, load_config, save_config


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.n_layers == 1 and cfg.lambda_merge == 0.05 and cfg.mu == 1.0
    assert cfg.max_epochs == 1000 and cfg.patience == 50


def test_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=3, tau=0.5, attention="exact")
    p = tmp_path / "c.json"
    save_config(cfg, p)
    assert load_config(p) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="lamda_merge"):
        ExperimentConfig.from_dict({"lamda_merge": 0.1})


@pytest.mark.parametrize("doc", [{"seed": 1.5}, {"gumbel": 1}, {"tau": "x"}, {"attention": 3}, {"seed": True}])
def test_type_checks(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_int_accepted_for_float():
    assert ExperimentConfig.from_dict({"tau": 1}).tau == 1.0


@pytest.mark.parametrize(
    "kw", [{"hidden_dim": 3}, {"tau": 0.0}, {"n_layers": 0}, {"train_len": 1}, {"mu": -1.0}, {"attention": "dense"}]
)
def test_value_checks(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig(seed=1)
    assert a.hash() == ExperimentConfig().hash() != b.hash()
    assert len(a.hash()) == 12


def test_seed_override():
    cfg = ExperimentConfig(seed=1)
    assert apply_seed_override(cfg, {}).seed == 1
    assert apply_seed_override(cfg, {SEED_ENV: "9"}).seed == 9
    with pytest.raises(ConfigError):
        apply_seed_override(cfg, {SEED_ENV: "nine"})


def test_malformed_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"seed": 1,}')
    with pytest.raises(ConfigError, match="line 1"):
        load_config(p)
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        load_config(p)
