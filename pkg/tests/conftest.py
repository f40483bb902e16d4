"""Shared fixtures: a fast miniature pipeline run and the full desk run.

The mini run exercises every stage end to end in under a minute and backs the
CLI/service tests. The desk run trains the real (small) models once per
session and backs the trained-behavior tests and the acceptance suite.
"""

import os

import pytest

from lamworld import evalrun, pipeline
from lamworld.config import load_config

MINI_CONFIG = """\
[run]
seed = 0

[data]
episode_length = 10
train_episodes_per_embodiment = 14
val_episodes_per_embodiment = 4
finetune_episodes = 40

[lam]
width = 32
batch_size = 8
steps = 30
warmup_steps = 10
val_every = 30

[world]
width = 32
blocks = 1
batch_size = 4
steps = 20
euler_steps = 3

[policy]
width = 32
blocks = 1
batch_size = 8
steps = 15

[lowlevel]
batch_size = 4
steps = 10
seeds = 1

[eval]
eval_episodes = 12
predictiveness_m = 40
predictiveness_ns = 1,2,4
migration_sources = 2
migration_targets = 1
controllability_actions = 2
ablation_steps = 8
retrieval_rows = 2
rollout_horizon = 1
"""


def write_mini_config(path) -> None:
    path.write_text(MINI_CONFIG)


def run_all_stages(cfg, log=lambda *a, **k: None) -> None:
    pipeline.gen_data(cfg, log=log)
    pipeline.train_lam_stage(cfg, log=log)
    pipeline.label_stage(cfg, log=log)
    pipeline.train_world_stage(cfg, log=log)
    pipeline.train_policy_stage(cfg, log=log)
    pipeline.finetune_stage(cfg, log=log)


@pytest.fixture(scope="session")
def mini_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("mini") / "mini.ini"
    write_mini_config(path)
    return path


@pytest.fixture(scope="session")
def mini_run(mini_config_path, tmp_path_factory):
    """A complete tiny run directory (untuned models, full artifact layout)."""
    run_dir = tmp_path_factory.mktemp("mini_run")
    cfg = load_config(mini_config_path)
    cfg.run_dir_override = str(run_dir)
    run_all_stages(cfg)
    return cfg


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full desk-scale pipeline; trained once and shared by every
    trained-behavior and acceptance test. Honors LAMWORLD_RUN_DIR to reuse an
    existing completed run directory across pytest invocations."""
    existing = os.environ.get("LAMWORLD_RUN_DIR")
    cfg = load_config(None)
    if existing:
        cfg.run_dir_override = existing
    else:
        cfg.run_dir_override = str(tmp_path_factory.mktemp("desk_run"))
    run_all_stages(cfg, log=print)
    return cfg
