"""Config parsing: strict keys, types, validation, env override."""

import pytest

from lamworld.config import RUN_DIR_ENV, RunConfig, load_config
from lamworld.errors import ConfigError


def test_defaults_load():
    cfg = load_config(None)
    assert cfg.codebook.num_tokens == 4
    assert cfg.codebook.codebook_size == 16
    assert cfg.codebook.code_dim == 32
    assert cfg.lam.gap == 3
    assert cfg.policy.chunk_len == 3
    assert cfg.lowlevel.fraction == 0.01


def test_parse_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[lam]\nsteps=7\nlearning_rate=2e-4\n\n[run]\nseed=5\n")
    cfg = load_config(path)
    assert cfg.lam.steps == 7
    assert cfg.lam.learning_rate == 2e-4
    assert cfg.run.seed == 5
    assert cfg.world.steps == RunConfig().world.steps  # untouched section


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[nosuch]\nx=1\n")
    with pytest.raises(ConfigError, match="nosuch"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[lam]\nbanana=1\n")
    with pytest.raises(ConfigError, match="banana"):
        load_config(path)


def test_bad_type_names_field(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[lam]\nsteps=abc\n")
    with pytest.raises(ConfigError, match=r"\[lam\] steps"):
        load_config(path)


def test_semantic_validation(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[lam]\npatch=5\n")
    with pytest.raises(ConfigError, match="patch"):
        load_config(path)
    path.write_text("[lowlevel]\nfraction=0\n")
    with pytest.raises(ConfigError, match="fraction"):
        load_config(path)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.ini")


def test_run_dir_env_override(monkeypatch, tmp_path):
    cfg = load_config(None)
    monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "env_runs"))
    assert cfg.run_dir() == tmp_path / "env_runs"
    # explicit override beats the environment
    cfg.run_dir_override = str(tmp_path / "flag_runs")
    assert cfg.run_dir() == tmp_path / "flag_runs"


def test_resolved_text_roundtrips(tmp_path):
    cfg = load_config(None)
    cfg.lam.steps = 99
    echo = tmp_path / "echo.ini"
    echo.write_text(cfg.resolved_text())
    again = load_config(echo)
    assert again.lam.steps == 99
    assert again.resolved_text() == cfg.resolved_text()


def test_derived_model_configs():
    cfg = load_config(None)
    lam_cfg = cfg.lam_config()
    assert lam_cfg.codebook.num_tokens == 4
    assert lam_cfg.image_hw == (32, 32)
    world_cfg = cfg.world_config()
    assert world_cfg.lam == lam_cfg
    policy_cfg = cfg.policy_config()
    assert policy_cfg.chunk_len == 3
