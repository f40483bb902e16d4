"""Pipeline stages behind the CLI: generate -> train -> label -> train -> evaluate.

Each stage writes its artifacts under one run directory, echoes the resolved
config it ran with, and is skipped on rerun once its done-marker exists, so a
rerun of the whole pipeline resumes at the first incomplete stage. Reruns from
scratch are byte-identical for a fixed config and seed.
"""

from __future__ import annotations

import itertools
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoints, datafmt, evalsuite, figures, worldgen
from .config import RunConfig
from .errors import MissingArtifact
from .lam import (
    LamTrainConfig,
    LatentActionModel,
    PairWindows,
    label_dataset,
    iter_labeled_pairs,
    train_lam,
)
from .policy import (
    FoundationPolicy,
    LowLevelPolicy,
    PolicyTrainConfig,
    env_task_success,
    policy_forward,
    rollout_policy_in_env,
    rollout_policy_in_world,
    train_lowlevel,
    train_policy,
)
from .worldgen import ActionKind, DatasetMixture, Embodiment, VideoClip
from .worldmodel import WorldModel, train_world

TRAIN_DATASETS = {Embodiment.ARM_A: "train_arm_a", Embodiment.ARM_B: "train_arm_b"}
VAL_DATASETS = {Embodiment.ARM_A: "val_arm_a", Embodiment.ARM_B: "val_arm_b"}
FINETUNE_DATASET = "finetune_arm_a"

_SEED_BLOCKS = {
    "train_arm_a": 1_000_000,
    "train_arm_b": 2_000_000,
    "val_arm_a": 3_000_000,
    "val_arm_b": 4_000_000,
    "finetune_arm_a": 5_000_000,
    "eval_corpus": 6_000_000,
    "eval_migration": 7_000_000,
    "eval_scenes": 8_000_000,
    "jitter": 9_000_000,
}


def dataset_seed(cfg: RunConfig, name: str, index: int) -> int:
    return cfg.run.seed * 100_000_000 + _SEED_BLOCKS[name] + index


def stage_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.run_dir() / name


def _begin_stage(cfg: RunConfig, name: str, force: bool, log) -> Path | None:
    """Prepare a stage directory; returns None when already complete."""
    path = stage_dir(cfg, name)
    if (path / "done.txt").exists():
        if not force:
            log(f"[{name}] already complete; skipping (use --force to redo)")
            return None
        shutil.rmtree(path)
    elif path.exists() and force:
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.ini").write_text(cfg.resolved_text())
    return path


def _finish_stage(path: Path) -> None:
    (path / "done.txt").write_text("ok\n")


# --------------------------------------------------------------------------
# gen-data


def _generate_clean(cfg: RunConfig, name: str, embodiment: Embodiment, count: int) -> list[VideoClip]:
    return [
        worldgen.generate_episode(dataset_seed(cfg, name, i), embodiment, cfg.data.episode_length)
        for i in range(count)
    ]


def _apply_video_pipeline(
    cfg: RunConfig, clips: list[VideoClip], rng: np.random.Generator
) -> tuple[list[VideoClip], list[dict]]:
    """Jitter a fraction of clips, filter at the configured quantile, stabilize."""
    jittered_mask = rng.random(len(clips)) < cfg.data.jitter_fraction
    processed = [
        worldgen.inject_camera_jitter(c, cfg.data.jitter_magnitude, seed=dataset_seed(cfg, "jitter", i))
        if jittered_mask[i]
        else c
        for i, c in enumerate(clips)
    ]
    scores = [worldgen.shakiness_score(c) for c in processed]
    threshold = worldgen.shakiness_threshold(scores, cfg.data.filter_keep_fraction)
    result = worldgen.filter_and_stabilize(processed, threshold)
    kept_ids = {c.clip_id for c in result.clips}
    report = [
        {
            "clip_id": c.clip_id,
            "jittered": int(jittered_mask[i]),
            "shakiness": scores[i],
            "kept": int(c.clip_id in kept_ids),
        }
        for i, c in enumerate(clips)
    ]
    return result.clips, report


def gen_data(cfg: RunConfig, force: bool = False, log=print) -> None:
    path = _begin_stage(cfg, "data", force, log)
    if path is None:
        return
    report_rows = []
    for embodiment, name in TRAIN_DATASETS.items():
        clips = _generate_clean(cfg, name, embodiment, cfg.data.train_episodes_per_embodiment)
        rng = np.random.default_rng(dataset_seed(cfg, name, 0))
        kept, rows = _apply_video_pipeline(cfg, clips, rng)
        report_rows.extend(rows)
        datafmt.save_dataset(path / name, kept)
        log(f"[data] {name}: generated {len(clips)}, kept {len(kept)} after filtering")
    for embodiment, name in VAL_DATASETS.items():
        clips = _generate_clean(cfg, name, embodiment, cfg.data.val_episodes_per_embodiment)
        datafmt.save_dataset(path / name, clips)
        log(f"[data] {name}: {len(clips)} clean clips")
    finetune = _generate_clean(cfg, FINETUNE_DATASET, Embodiment.ARM_A, cfg.data.finetune_episodes)
    datafmt.save_dataset(path / FINETUNE_DATASET, finetune)
    log(f"[data] {FINETUNE_DATASET}: {len(finetune)} clean clips")
    evalsuite.write_csv(path / "pipeline_report.csv", report_rows)
    _finish_stage(path)


def load_clips(cfg: RunConfig, dataset: str, producing_stage: str = "gen-data") -> list[VideoClip]:
    clips, _ = datafmt.load_dataset(stage_dir(cfg, "data") / dataset, producing_stage)
    return clips


def mixed_training_clips(cfg: RunConfig) -> list[VideoClip]:
    """Weighted union of the per-embodiment training sets via the mixture stream."""
    datasets = {name: load_clips(cfg, name) for name in TRAIN_DATASETS.values()}
    mix = DatasetMixture(
        sources=[
            (TRAIN_DATASETS[Embodiment.ARM_A], cfg.data.mixture_arm_a),
            (TRAIN_DATASETS[Embodiment.ARM_B], cfg.data.mixture_arm_b),
        ],
        seed=cfg.run.seed,
    )
    total = sum(len(c) for c in datasets.values())
    stream = worldgen.mixture_stream(mix, datasets)
    return list(itertools.islice(stream, total))


# --------------------------------------------------------------------------
# model stage helpers


def build_lam(cfg: RunConfig) -> LatentActionModel:
    return LatentActionModel(cfg.lam_config())


def load_lam(cfg: RunConfig) -> LatentActionModel:
    model = build_lam(cfg)
    checkpoints.load_module(stage_dir(cfg, "lam") / "checkpoint", model, "train-lam")
    model.eval()
    return model


def load_world(cfg: RunConfig) -> WorldModel:
    model = WorldModel(cfg.world_config())
    checkpoints.load_module(stage_dir(cfg, "world") / "checkpoint", model, "train-world")
    model.eval()
    return model


def load_policy(cfg: RunConfig) -> FoundationPolicy:
    model = FoundationPolicy(cfg.policy_config())
    checkpoints.load_module(stage_dir(cfg, "policy") / "checkpoint", model, "train-policy")
    model.eval()
    return model


def load_lowlevel(cfg: RunConfig) -> LowLevelPolicy:
    foundation = load_policy(cfg)
    model = LowLevelPolicy(cfg.policy_config(), foundation, use_latent=True)
    checkpoints.load_module(stage_dir(cfg, "lowlevel") / "checkpoint", model, "finetune-lowlevel")
    model.eval()
    return model


def _save_training_outputs(path: Path, module, curve, title: str) -> None:
    checkpoints.save_module(path / "checkpoint", module)
    evalsuite.write_csv(path / "curve.csv", curve.to_rows())
    if curve.val_steps:
        evalsuite.write_csv(
            path / "validation.csv",
            [{"step": s, "val_loss": v} for s, v in zip(curve.val_steps, curve.val_loss)],
        )
    figures.render_training_curve(curve, path / "curve.png", title)


def train_lam_stage(cfg: RunConfig, force: bool = False, log=print) -> None:
    path = _begin_stage(cfg, "lam", force, log)
    if path is None:
        return
    train_clips = mixed_training_clips(cfg)
    val_clips = load_clips(cfg, VAL_DATASETS[Embodiment.ARM_A]) + load_clips(
        cfg, VAL_DATASETS[Embodiment.ARM_B]
    )
    model, curve = train_lam(
        train_clips, val_clips, cfg.lam_config(), cfg.lam_train_config(), log=log
    )
    _save_training_outputs(path, model, curve, "latent action model")
    _finish_stage(path)


def label_stage(cfg: RunConfig, force: bool = False, log=print) -> None:
    path = _begin_stage(cfg, "labeled", force, log)
    if path is None:
        return
    model = load_lam(cfg)
    for name in (*TRAIN_DATASETS.values(), FINETUNE_DATASET):
        clips = load_clips(cfg, name)
        labels = label_dataset(clips, model, cfg.lam.gap)
        datafmt.save_dataset(
            path / name,
            clips,
            labels=labels,
            num_tokens=cfg.codebook.num_tokens,
            extra_manifest={"gap": str(cfg.lam.gap)},
        )
        n_pairs = sum(len(v) for v in labels.values())
        log(f"[label] {name}: {n_pairs} labeled pairs")
    _finish_stage(path)


def load_labeled(cfg: RunConfig, dataset: str) -> tuple[list[VideoClip], dict[str, list[datafmt.PairLabel]]]:
    return datafmt.load_dataset(stage_dir(cfg, "labeled") / dataset, "label")


def load_labeled_training(cfg: RunConfig) -> tuple[list[VideoClip], dict[str, list[datafmt.PairLabel]]]:
    clips: list[VideoClip] = []
    labels: dict[str, list[datafmt.PairLabel]] = {}
    for name in TRAIN_DATASETS.values():
        c, l = load_labeled(cfg, name)
        clips.extend(c)
        labels.update(l)
    return clips, labels


def train_world_stage(cfg: RunConfig, force: bool = False, log=print) -> None:
    path = _begin_stage(cfg, "world", force, log)
    if path is None:
        return
    clips, labels = load_labeled_training(cfg)
    lam_model = load_lam(cfg)
    model, curve = train_world(
        clips, labels, lam_model, cfg.world_config(), cfg.world_train_config(), log=log
    )
    _save_training_outputs(path, model, curve, "world model velocity loss")
    _finish_stage(path)


def train_policy_stage(cfg: RunConfig, force: bool = False, log=print) -> None:
    path = _begin_stage(cfg, "policy", force, log)
    if path is None:
        return
    clips, labels = load_labeled_training(cfg)
    lam_model = load_lam(cfg)
    model, curve = train_policy(
        clips, labels, lam_model, cfg.policy_config(), cfg.policy_train_config(), log=log
    )
    _save_training_outputs(path, model, curve, "foundation policy loss")
    _finish_stage(path)


def finetune_split(cfg: RunConfig, seed: int, fraction: float | None = None) -> list[VideoClip]:
    """Uniformly sample the configured fraction of finetune episodes."""
    clips = load_clips(cfg, FINETUNE_DATASET)
    fraction = cfg.lowlevel.fraction if fraction is None else fraction
    count = max(1, int(round(fraction * len(clips))))
    rng = np.random.default_rng(cfg.run.seed * 1000 + seed)
    idx = rng.choice(len(clips), size=count, replace=False)
    return [clips[int(i)] for i in sorted(idx)]


def finetune_stage(cfg: RunConfig, force: bool = False, fraction: float | None = None, log=print) -> None:
    path = _begin_stage(cfg, "lowlevel", force, log)
    if path is None:
        return
    foundation = load_policy(cfg)
    split = finetune_split(cfg, seed=0, fraction=fraction)
    log(f"[lowlevel] finetuning on {len(split)} episodes")
    model, curve = train_lowlevel(
        split, cfg.policy_config(), cfg.lowlevel_train_config(), foundation, use_latent=True, log=log
    )
    _save_training_outputs(path, model, curve, "low-level policy loss")
    _finish_stage(path)


# --------------------------------------------------------------------------
# evaluation corpora


def eval_corpus_clips(cfg: RunConfig, count: int | None = None) -> list[VideoClip]:
    """Held-out clips (fresh seeds, both embodiments) for labeling-based evals."""
    count = count if count is not None else cfg.eval.eval_episodes
    clips = []
    for i in range(count):
        embodiment = Embodiment.ARM_A if i % 2 == 0 else Embodiment.ARM_B
        clips.append(
            worldgen.generate_episode(
                dataset_seed(cfg, "eval_corpus", i), embodiment, cfg.data.episode_length
            )
        )
    return clips


def labeled_eval_pairs(cfg: RunConfig, lam_model: LatentActionModel, count: int | None = None):
    clips = eval_corpus_clips(cfg, count)
    labels = label_dataset(clips, lam_model, cfg.lam.gap)
    return list(iter_labeled_pairs(clips, labels, lam_model))


def move_clips(cfg: RunConfig, block: str, count: int, embodiment: Embodiment) -> list[VideoClip]:
    """Held-out single-direction clips of the requested embodiment."""
    out = []
    i = 0
    while len(out) < count:
        clip = worldgen.generate_episode(
            dataset_seed(cfg, block, i), embodiment, cfg.data.episode_length
        )
        i += 1
        if clip.gt_actions[0].kind in worldgen.MOVE_KINDS:
            out.append(clip)
    return out
