"""Evaluation suites wired to run-directory artifacts.

Each suite loads the checkpoints it needs, computes its scores next to the
relevant chance level, and writes a CSV, a plain-text table, and (where the
suite has a visual analog) a rendered PNG into run_dir/eval/<suite>/.
"""

from __future__ import annotations

import numpy as np
import torch

from . import evalsuite, figures, pipeline, worldgen
from .config import RunConfig
from .errors import ConfigError
from .evalsuite import write_csv, write_table
from .lam import LamTrainConfig, LatentAction
from .policy import (
    env_task_success,
    pad_instruction,
    policy_forward,
    rollout_policy_in_env,
    rollout_policy_in_world,
    snap_to_codebook,
    train_lowlevel,
)
from .worldgen import ActionKind, Embodiment
from .worldmodel import WorldTrainConfig, train_world


def _suite_dir(cfg: RunConfig, name: str):
    path = pipeline.stage_dir(cfg, "eval") / name
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.ini").write_text(cfg.resolved_text())
    return path


def eval_retrieval(cfg: RunConfig, log=print) -> dict:
    out = _suite_dir(cfg, "retrieval")
    lam_model = pipeline.load_lam(cfg)
    pairs = pipeline.labeled_eval_pairs(cfg, lam_model)
    rng = np.random.default_rng(cfg.run.seed)
    queries = rng.choice(len(pairs), size=min(cfg.eval.retrieval_rows, len(pairs)), replace=False)
    results = [evalsuite.nn_retrieval(pairs[int(q)], pairs, k=cfg.eval.retrieval_k) for q in queries]
    rows = []
    kind_matches = []
    for res in results:
        for rank, (neighbor, dist) in enumerate(res.neighbors, start=1):
            rows.append(
                {
                    "query": res.query.action.source[0],
                    "query_t": res.query.action.source[1],
                    "query_kind": res.query.gt_kind.name,
                    "rank": rank,
                    "neighbor": neighbor.action.source[0],
                    "neighbor_t": neighbor.action.source[1],
                    "neighbor_kind": neighbor.gt_kind.name,
                    "distance": dist,
                }
            )
            kind_matches.append(res.query.gt_kind == neighbor.gt_kind)
    match_rate = float(np.mean(kind_matches))
    chance = float(np.mean([
        np.mean([p.gt_kind == q.gt_kind for p in pairs]) for q in (pairs[int(i)] for i in queries)
    ]))
    write_csv(out / "retrieval.csv", rows)
    summary = [{"neighbor_kind_match": match_rate, "chance_level": chance, "k": cfg.eval.retrieval_k}]
    write_table(out / "summary.txt", summary, "nearest-neighbor retrieval")
    figures.render_pair_grid(results, out / "retrieval_panels.png")
    log(f"[eval/retrieval] neighbor kind match {match_rate:.3f} (chance {chance:.3f})")
    return {"match_rate": match_rate, "chance": chance}


def eval_predictiveness(cfg: RunConfig, log=print) -> evalsuite.PredictivenessCurve:
    out = _suite_dir(cfg, "predictiveness")
    lam_model = pipeline.load_lam(cfg)
    pairs = pipeline.labeled_eval_pairs(cfg, lam_model)
    ns = [n for n in cfg.eval.ns_list() if n <= len(pairs)] + [len(pairs)]
    curve = evalsuite.predictiveness_curve(pairs, Ns=ns, M=cfg.eval.predictiveness_m, seed=cfg.run.seed)
    write_csv(out / "predictiveness.csv", curve.to_rows())
    write_table(out / "predictiveness.txt", curve.to_rows(), "normalized std of actions among neighbors")
    figures.render_predictiveness(curve, out / "predictiveness.png")
    log(f"[eval/predictiveness] N=1 row {curve.normalized_std[0].tolist()}")
    return curve


def eval_alignment(cfg: RunConfig, log=print) -> evalsuite.AlignmentReport:
    out = _suite_dir(cfg, "alignment")
    lam_model = pipeline.load_lam(cfg)
    pairs = pipeline.labeled_eval_pairs(cfg, lam_model)
    report = evalsuite.alignment_nmi(pairs, seed=cfg.run.seed)
    rows = [
        {
            "nmi": report.nmi,
            "shuffled_nmi": report.shuffled_nmi,
            "pairs": report.num_pairs,
            "distinct_tuples": report.num_distinct_tuples,
        }
    ]
    write_csv(out / "alignment.csv", rows)
    write_table(out / "alignment.txt", rows, "code indices vs ground-truth action kinds")
    log(f"[eval/alignment] NMI {report.nmi:.3f} (shuffled {report.shuffled_nmi:.3f})")
    return report


def eval_migration(cfg: RunConfig, log=print) -> dict:
    out = _suite_dir(cfg, "migration")
    lam_model = pipeline.load_lam(cfg)
    world = pipeline.load_world(cfg)
    sources = pipeline.move_clips(cfg, "eval_migration", cfg.eval.migration_sources, Embodiment.ARM_A)
    target_clips_b = pipeline.move_clips(cfg, "eval_scenes", cfg.eval.migration_targets, Embodiment.ARM_B)
    target_clips_a = pipeline.move_clips(cfg, "eval_scenes", cfg.eval.migration_targets, Embodiment.ARM_A)
    cross_targets = [(c.frames[0], c.embodiment) for c in target_clips_b]
    same_targets = [(c.frames[0], c.embodiment) for c in target_clips_a]
    cross, cross_strips = evalsuite.migration_eval(
        sources, cross_targets, lam_model, world, seed=cfg.run.seed, keep_rollouts=4
    )
    same, _ = evalsuite.migration_eval(
        sources, same_targets, lam_model, world, seed=cfg.run.seed + 1
    )
    rows = [
        {
            "source": c.source_clip_id,
            "source_kind": c.source_kind.name,
            "target_embodiment": c.target_embodiment.value,
            "predicted": c.predicted.name if c.predicted else "NONE",
            "matched": int(c.matched),
            "tracker_failed": int(c.tracker_failed),
        }
        for c in cross.cases + same.cases
    ]
    write_csv(out / "migration.csv", rows)
    summary = [
        {
            "cross_embodiment_rate": cross.success_rate,
            "same_embodiment_rate": same.success_rate,
            "chance": evalsuite.random_direction_baseline(),
            "cross_tracker_failures": cross.tracker_failures,
        }
    ]
    write_table(out / "summary.txt", summary, "direction-match migration")
    confusion_rows = [
        {"source_kind": src, "predicted": pred, "count": count}
        for (src, pred), count in sorted(cross.confusion().items())
    ]
    write_csv(out / "confusion.csv", confusion_rows)
    strips = []
    for i, (src, gen) in enumerate(cross_strips):
        strips.append((f"source {i}", src))
        strips.append((f"generated {i}", gen))
    if strips:
        figures.render_frame_strips(strips, out / "migration_strips.png")
    log(
        f"[eval/migration] cross {cross.success_rate:.3f} same {same.success_rate:.3f} "
        f"chance {evalsuite.random_direction_baseline():.2f}"
    )
    return {"cross": cross.success_rate, "same": same.success_rate}


def _controllability_scene(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """A held-out frame containing the agent and two distractors."""
    i = 0
    while True:
        seed = pipeline.dataset_seed(cfg, "eval_scenes", 500 + i)
        state, _ = worldgen.initial_state(seed, Embodiment.ARM_A)
        if len(state.sprites) >= 3:
            frame = worldgen.render(state)
            target = state.sprites[state.agent_index].color
            others = [
                s.color for j, s in enumerate(state.sprites) if j != state.agent_index
            ]
            return frame, target, others
        i += 1


def eval_controllability(cfg: RunConfig, log=print) -> evalsuite.ControllabilityReport:
    out = _suite_dir(cfg, "controllability")
    lam_model = pipeline.load_lam(cfg)
    world = pipeline.load_world(cfg)
    frame, target_color, other_colors = _controllability_scene(cfg)
    probes = pipeline.move_clips(
        cfg, "eval_migration", cfg.eval.controllability_actions, Embodiment.ARM_A
    )
    actions = []
    labels = []
    for clip in probes:
        actions.append(evalsuite.clip_action_sequence(clip, lam_model, cfg.lam.gap)[0])
        labels.append(clip.gt_actions[0].kind.name)
    report, generated = evalsuite.multi_object_controllability(
        frame, target_color, other_colors, actions, lam_model, world, seed=cfg.run.seed
    )
    rows = [
        {
            "action": "-".join(str(i) for i in p.action_indices),
            "label": labels[i],
            "targeted_px": p.targeted_displacement,
            "max_off_target_px": max(p.off_target_displacements, default=0.0),
        }
        for i, p in enumerate(report.probes)
    ]
    write_csv(out / "controllability.csv", rows)
    summary = [
        {"targeted_median_px": report.targeted_median, "off_target_median_px": report.off_target_median}
    ]
    write_table(out / "summary.txt", summary, "per-sprite displacement under probe actions")
    figures.render_controllability(frame, generated, labels, out / "controllability_grid.png")
    log(
        f"[eval/controllability] targeted median {report.targeted_median:.2f}px, "
        f"off-target median {report.off_target_median:.2f}px"
    )
    return report


def eval_rollouts(cfg: RunConfig, log=print) -> dict:
    out = _suite_dir(cfg, "rollouts")
    lam_model = pipeline.load_lam(cfg)
    world = pipeline.load_world(cfg)
    policy = pipeline.load_policy(cfg)
    state, _ = worldgen.initial_state(pipeline.dataset_seed(cfg, "eval_scenes", 900), Embodiment.ARM_A)
    frame = worldgen.render(state)
    instructions = ["MOVE LEFT", "MOVE RIGHT", "MOVE UP"]
    rollouts = {}
    strips = []
    for text in instructions:
        tokens = [worldgen.VOCAB[w] for w in text.split()]
        frames = rollout_policy_in_world(
            tokens, frame, policy, lam_model, world, horizon=cfg.eval.rollout_horizon,
            seed=cfg.run.seed,
        )
        rollouts[text] = frames
        strips.append((text, frames))
    resample = rollout_policy_in_world(
        [worldgen.VOCAB[w] for w in instructions[0].split()], frame, policy, lam_model, world,
        horizon=cfg.eval.rollout_horizon, seed=cfg.run.seed + 17,
    )
    names = list(rollouts)
    across = [
        float(np.abs(rollouts[a][-1] - rollouts[b][-1]).mean())
        for i, a in enumerate(names) for b in names[i + 1 :]
    ]
    within = float(np.abs(rollouts[names[0]][-1] - resample[-1]).mean())
    rows = [{"pair": "different-instruction", "mean_abs_diff": float(np.mean(across))},
            {"pair": "same-instruction-reseed", "mean_abs_diff": within}]
    write_csv(out / "divergence.csv", rows)
    write_table(out / "summary.txt", rows, "final-frame divergence across instructions")
    figures.render_frame_strips(strips, out / "instruction_rollouts.png")
    log(f"[eval/rollouts] across {np.mean(across):.4f} within {within:.4f}")
    return {"across": float(np.mean(across)), "within": within}


def eval_ablation(cfg: RunConfig, log=print) -> list[evalsuite.AblationEntry]:
    out = _suite_dir(cfg, "ablation")
    single = pipeline.load_clips(cfg, pipeline.TRAIN_DATASETS[Embodiment.ARM_A])
    mixed = pipeline.mixed_training_clips(cfg)
    val_b = pipeline.load_clips(cfg, pipeline.VAL_DATASETS[Embodiment.ARM_B])
    train_cfg = LamTrainConfig(
        batch_size=cfg.lam.batch_size,
        steps=cfg.eval.ablation_steps,
        learning_rate=cfg.lam.learning_rate,
        seed=cfg.run.seed,
        val_every=max(cfg.eval.ablation_steps, 1),
    )
    entries = evalsuite.ablation_report(
        {"single_embodiment": single, "mixed_embodiment": mixed},
        val_b, cfg.lam_config(), train_cfg, log=log,
    )
    rows = [
        {"config": e.name, "heldout_val_loss": e.val_loss, "full_scale_reference": e.reference}
        for e in entries
    ]
    write_csv(out / "ablation.csv", rows)
    write_table(out / "ablation.txt", rows, "held-out embodiment validation loss")
    return entries


def eval_policy_success(cfg: RunConfig, log=print) -> dict:
    out = _suite_dir(cfg, "policy_success")
    foundation = pipeline.load_policy(cfg)
    rows = []
    rates = {"pretrained": [], "scratch": []}
    for seed in range(cfg.lowlevel.seeds):
        split = pipeline.finetune_split(cfg, seed=seed)
        for variant in ("pretrained", "scratch"):
            use_latent = variant == "pretrained"
            model, _ = train_lowlevel(
                split,
                cfg.policy_config(),
                cfg.lowlevel_train_config(seed=cfg.run.seed * 100 + seed),
                foundation if use_latent else None,
                use_latent=use_latent,
                log=log,
            )
            rate = _success_battery(cfg, model, seed)
            rates[variant].append(rate)
            rows.append({"seed": seed, "variant": variant, "success_rate": rate,
                         "episodes": len(split)})
            log(f"[eval/policy] seed {seed} {variant}: success {rate:.3f}")
    summary = [
        {
            "variant": variant,
            "mean_success": float(np.mean(values)),
            "seeds": cfg.lowlevel.seeds,
            "chance": evalsuite.random_direction_baseline(),
        }
        for variant, values in rates.items()
    ]
    write_csv(out / "policy_success.csv", rows)
    write_table(out / "summary.txt", summary, "task success after low-data finetuning")
    return {v: float(np.mean(r)) for v, r in rates.items()}


def _success_battery(cfg: RunConfig, lowlevel, seed: int, states_per_kind: int = 6) -> float:
    successes = []
    for ki, kind in enumerate(worldgen.MOVE_KINDS):
        tokens, _ = worldgen.instruction_for_kind(kind)
        for si in range(states_per_kind):
            state_seed = pipeline.dataset_seed(cfg, "eval_scenes", 2000 + ki * 100 + si)
            state, _ = worldgen.initial_state(state_seed, Embodiment.ARM_A)
            states, _ = rollout_policy_in_env(tokens, state, lowlevel, cfg.lowlevel.horizon, cfg.lam.gap)
            successes.append(env_task_success(states, kind))
    return float(np.mean(successes))


def eval_worldcheck(cfg: RunConfig, log=print) -> dict:
    """One-step accuracy of the world model against simple controls."""
    out = _suite_dir(cfg, "worldcheck")
    lam_model = pipeline.load_lam(cfg)
    world = pipeline.load_world(cfg)
    clips = pipeline.move_clips(cfg, "eval_scenes", 12, Embodiment.ARM_A)
    gap = cfg.lam.gap
    model_err, copy_err = [], []
    matches = []
    for ci, clip in enumerate(clips):
        actions = evalsuite.clip_action_sequence(clip, lam_model, gap)
        rollout = evalsuite.apply_action_sequence_batch(
            torch.from_numpy(clip.frames[0]).unsqueeze(0), actions[:1], world, lam_model,
            seed=cfg.run.seed + ci,
        ).numpy()[0]
        model_err.append(float(np.abs(rollout[1] - clip.frames[gap]).mean()))
        copy_err.append(float(np.abs(clip.frames[0] - clip.frames[gap]).mean()))
        color = evalsuite.agent_color(clip.embodiment)
        c0 = evalsuite.sprite_centroid(rollout[0], color)
        c1 = evalsuite.sprite_centroid(rollout[1], color)
        if c0 is not None and c1 is not None:
            dy, dx = evalsuite.circular_displacement(c0, c1)
            matches.append(evalsuite.classify_direction(dy, dx) is clip.gt_actions[0].kind)
        else:
            matches.append(False)
    rows = [
        {
            "one_step_mae": float(np.mean(model_err)),
            "copy_last_frame_mae": float(np.mean(copy_err)),
            "self_direction_match": float(np.mean(matches)),
        }
    ]
    write_csv(out / "worldcheck.csv", rows)
    write_table(out / "summary.txt", rows, "world model one-step checks")
    log(f"[eval/worldcheck] {rows[0]}")
    return rows[0]


SUITES = {
    "retrieval": eval_retrieval,
    "predictiveness": eval_predictiveness,
    "alignment": eval_alignment,
    "migration": eval_migration,
    "controllability": eval_controllability,
    "rollouts": eval_rollouts,
    "ablation": eval_ablation,
    "policy-success": eval_policy_success,
    "worldcheck": eval_worldcheck,
}


def run_suite(cfg: RunConfig, name: str, log=print):
    if name == "all":
        return {suite: fn(cfg, log=log) for suite, fn in SUITES.items()}
    if name not in SUITES:
        raise ConfigError(f"unknown eval suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name](cfg, log=log)
