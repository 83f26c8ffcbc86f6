"""RunConfig range enforcement and key=value config parsing."""

import pytest

from seqregen.config import (
    ALLOWED_BATCH,
    ALLOWED_LR,
    RunConfig,
    load_config,
    parse_config_text,
)
from seqregen.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.lr == 1e-5
    assert cfg.batch == 64
    assert cfg.cls_weight == 175.0
    assert cfg.gp_weight == 10.0
    assert cfg.n_critic == 5
    assert cfg.latent_width is None


def test_every_allowed_lr_and_batch_accepted():
    for lr in ALLOWED_LR:
        assert RunConfig(lr=lr).lr == lr
    for batch in ALLOWED_BATCH:
        assert RunConfig(batch=batch).batch == batch


def test_lr_outside_sweep_rejected():
    with pytest.raises(ConfigError, match="lr must be one of"):
        RunConfig(lr=2e-4)


def test_batch_outside_set_rejected():
    with pytest.raises(ConfigError, match="batch must be one of"):
        RunConfig(batch=48)


@pytest.mark.parametrize(
    "field,value",
    [
        ("val_fraction", 1.5),
        ("p_uncond", 1.0),
        ("guidance", -0.5),
        ("kmer", 0),
        ("n_critic", 0),
        ("latent_width", 0),
        ("steps", 0),
        ("gan_steps", 0),
        ("dim", 0),
        ("max_len", 0),
        ("epochs", -1),
        ("cls_weight", -1.0),
        ("gp_weight", -1.0),
    ],
)
def test_out_of_range_values_rejected(field, value):
    with pytest.raises(ConfigError):
        RunConfig(**{field: value})


def test_from_mapping_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_mapping({"lr": "1e-4", "warp_factor": "9"})


def test_from_mapping_parses_strings():
    cfg = RunConfig.from_mapping(
        {"lr": "4e-4", "batch": "128", "seed": "7", "latent_width": "512"}
    )
    assert cfg.lr == 4e-4
    assert cfg.batch == 128
    assert cfg.seed == 7
    assert cfg.latent_width == 512


def test_from_mapping_parses_none_latent_width():
    assert RunConfig.from_mapping({"latent_width": "none"}).latent_width is None


def test_from_mapping_bad_value():
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.from_mapping({"batch": "many"})


def test_parse_config_text():
    text = "# comment\n\nlr = 4e-4\nbatch=32\n"
    assert parse_config_text(text) == {"lr": "4e-4", "batch": "32"}


def test_parse_config_text_missing_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("lr=1e-4\nbatch 32\n")


def test_parse_config_text_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config_text("lr=1e-4\nlr=1e-5\n")


def test_merged_skips_none_and_revalidates():
    cfg = RunConfig()
    assert cfg.merged(batch=None, seed=3).batch == 64
    assert cfg.merged(seed=3).seed == 3
    with pytest.raises(ConfigError):
        cfg.merged(batch=999)


def test_round_trip_through_mapping():
    cfg = RunConfig(lr=4e-5, batch=32, seed=11, latent_width=16)
    assert RunConfig.from_mapping(cfg.as_dict()) == cfg


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("lr=1e-3\nepochs=5\n")
    cfg = load_config(path)
    assert cfg.lr == 1e-3
    assert cfg.epochs == 5


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")
