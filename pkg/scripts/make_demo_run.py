#!/usr/bin/env python3
"""Build a miniature but complete run directory for demos and UI tests.

Usage: make_demo_run.py RUN_DIR

Uses tiny datasets and step counts so the whole pipeline finishes in well
under a minute; the models are untuned but every endpoint works.
"""

import sys
import tempfile
from pathlib import Path

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
"""


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__, file=sys.stderr)
        return 2
    run_dir = Path(sys.argv[1])
    from lamworld import pipeline
    from lamworld.config import load_config

    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(MINI_CONFIG)
        config_path = fh.name
    cfg = load_config(config_path)
    cfg.run_dir_override = str(run_dir)
    pipeline.gen_data(cfg)
    pipeline.train_lam_stage(cfg)
    pipeline.label_stage(cfg)
    pipeline.train_world_stage(cfg)
    pipeline.train_policy_stage(cfg)
    pipeline.finetune_stage(cfg)
    print(f"demo run ready at {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
