"""Quantitative evaluations with ground-truth oracles from the sprite world.

Every score here is paired with an explicit chance level or an exact endpoint
so that a trained model's numbers are interpretable on their own: retrieval is
exact nearest-neighbor by definition, the predictiveness curve is pinned to 0
at N=1 and ~1 at the corpus size, and migration / controllability are judged
by circular centroid tracking of the known sprite colors.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.metrics import normalized_mutual_info_score

from . import worldgen
from .lam import (
    LabeledPair,
    LamConfig,
    LamTrainConfig,
    LatentAction,
    LatentActionModel,
    train_lam,
    validation_loss,
)
from .worldgen import ActionKind, Embodiment, VideoClip
from .worldmodel import WorldModel, apply_action_sequence_batch

# held-out validation losses from the original full-scale run, for context only
REFERENCE_FULL_SCALE_VAL_LOSS = {"single_source": 0.145, "mixed": 0.112}

ACTION_DIM_NAMES = ("dx", "dy", "grab")


# --------------------------------------------------------------------------
# centroid tracking (toroidal world)


def sprite_centroid(
    frame: np.ndarray, color: np.ndarray, sigma: float = 0.18, min_weight: float = 2.0
) -> np.ndarray | None:
    """Weighted circular centroid of pixels matching `color`; None if the
    total match weight is too small (tracker failure)."""
    d2 = ((frame - color.reshape(1, 1, 3)) ** 2).sum(axis=2)
    w = np.exp(-d2 / (2 * sigma**2))
    w[w < 0.05] = 0.0
    total = w.sum()
    if total < min_weight:
        return None
    h, wd = frame.shape[:2]
    ys, xs = np.mgrid[0:h, 0:wd]
    cy = _circular_mean(ys, w, h)
    cx = _circular_mean(xs, w, wd)
    return np.array([cy, cx])


def _circular_mean(coords: np.ndarray, weights: np.ndarray, size: int) -> float:
    angles = coords * (2 * np.pi / size)
    z = (weights * np.exp(1j * angles)).sum()
    return float((np.angle(z) % (2 * np.pi)) / (2 * np.pi) * size)


def circular_displacement(a: np.ndarray, b: np.ndarray, sizes=(worldgen.H, worldgen.W)) -> np.ndarray:
    """Shortest (dy, dx) from a to b on the torus."""
    out = np.empty(2)
    for i, size in enumerate(sizes):
        out[i] = (b[i] - a[i] + size / 2) % size - size / 2
    return out


def classify_direction(dy: float, dx: float, dead_zone: float = 0.5) -> ActionKind | None:
    if max(abs(dx), abs(dy)) < dead_zone:
        return None
    if abs(dx) >= abs(dy):
        return ActionKind.RIGHT if dx > 0 else ActionKind.LEFT
    return ActionKind.DOWN if dy > 0 else ActionKind.UP


def agent_color(embodiment: Embodiment) -> np.ndarray:
    return worldgen.AGENT_COLORS[embodiment]


# --------------------------------------------------------------------------
# nearest-neighbor retrieval


@dataclass
class RetrievalResult:
    query: LabeledPair
    neighbors: list[tuple[LabeledPair, float]]


def _embedding_matrix(pairs: Sequence[LabeledPair]) -> np.ndarray:
    return np.stack([p.action.embedding.reshape(-1) for p in pairs]).astype(np.float64)


def nn_retrieval(query: LabeledPair, corpus: Sequence[LabeledPair], k: int = 3) -> RetrievalResult:
    """Exact k-nearest neighbors by Euclidean distance over flat embeddings."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = query.action.embedding.reshape(-1).astype(np.float64)
    mat = _embedding_matrix(corpus)
    d = np.sqrt(((mat - q) ** 2).sum(axis=1))
    order = [
        int(i) for i in np.argsort(d, kind="stable") if corpus[i].action.source != query.action.source
    ]
    top = order[: min(k, len(order))]
    return RetrievalResult(query=query, neighbors=[(corpus[i], float(d[i])) for i in top])


# --------------------------------------------------------------------------
# predictiveness of latent actions


@dataclass
class PredictivenessCurve:
    Ns: list[int]
    normalized_std: np.ndarray  # (len(Ns), action dims)
    dim_names: tuple[str, ...] = ACTION_DIM_NAMES

    def to_rows(self) -> list[dict[str, float]]:
        rows = []
        for i, n in enumerate(self.Ns):
            row = {"N": n}
            row.update({name: float(v) for name, v in zip(self.dim_names, self.normalized_std[i])})
            rows.append(row)
        return rows


def predictiveness_curve(
    pairs: Sequence[LabeledPair],
    Ns: Sequence[int] = (1, 2, 4, 8, 16, 32),
    M: int = 2000,
    seed: int = 0,
) -> PredictivenessCurve:
    """Std of ground-truth actions among latent-space neighbors, per dimension,
    averaged over M sampled queries and normalized by the corpus std.

    Neighborhoods include the query itself, so N=1 is exactly zero and
    N=len(pairs) is exactly one.
    """
    if any(p.gt_continuous is None for p in pairs):
        raise ValueError("predictiveness needs ground-truth continuous actions")
    Ns = sorted(set(int(n) for n in Ns))
    if Ns[0] < 1 or Ns[-1] > len(pairs):
        raise ValueError("every N must lie in [1, corpus size]")
    if M > len(pairs):
        warnings.warn(f"M={M} exceeds corpus size {len(pairs)}; clamping")
        M = len(pairs)
    rng = np.random.default_rng(seed)
    queries = rng.choice(len(pairs), size=M, replace=False)
    emb = torch.from_numpy(_embedding_matrix(pairs))
    actions = np.stack([p.gt_continuous for p in pairs]).astype(np.float64)
    corpus_std = actions.std(axis=0)
    corpus_std[corpus_std == 0] = 1.0
    max_n = Ns[-1]
    sums = np.zeros((len(Ns), actions.shape[1]))
    for start in range(0, len(queries), 256):
        q_idx = queries[start : start + 256]
        d = torch.cdist(emb[q_idx], emb)
        order = torch.argsort(d, dim=1, stable=True)[:, :max_n].numpy()
        for row in order:
            for j, n in enumerate(Ns):
                sums[j] += actions[row[:n]].std(axis=0)
    return PredictivenessCurve(Ns=Ns, normalized_std=sums / len(queries) / corpus_std)


# --------------------------------------------------------------------------
# latent / ground-truth alignment


@dataclass
class AlignmentReport:
    nmi: float
    shuffled_nmi: float
    num_pairs: int
    num_distinct_tuples: int


def alignment_nmi(pairs: Sequence[LabeledPair], seed: int = 0) -> AlignmentReport:
    """Normalized mutual information between code-index tuples and action kinds,
    with a shuffled-label control."""
    tuples = [p.action.indices for p in pairs]
    kinds = [int(p.gt_kind) for p in pairs]
    tuple_ids = {t: i for i, t in enumerate(sorted(set(tuples)))}
    x = [tuple_ids[t] for t in tuples]
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(kinds)
    return AlignmentReport(
        nmi=float(normalized_mutual_info_score(kinds, x)),
        shuffled_nmi=float(normalized_mutual_info_score(shuffled.tolist(), x)),
        num_pairs=len(pairs),
        num_distinct_tuples=len(tuple_ids),
    )


# --------------------------------------------------------------------------
# migration across embodiments


@dataclass
class MigrationCase:
    source_clip_id: str
    source_kind: ActionKind
    target_embodiment: Embodiment
    predicted: ActionKind | None
    matched: bool
    tracker_failed: bool


@dataclass
class MigrationReport:
    cases: list[MigrationCase] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean([c.matched for c in self.cases])) if self.cases else 0.0

    @property
    def tracker_failures(self) -> int:
        return sum(c.tracker_failed for c in self.cases)

    def confusion(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for c in self.cases:
            key = (c.source_kind.name, c.predicted.name if c.predicted else "NONE")
            out[key] = out.get(key, 0) + 1
        return out


def clip_action_sequence(
    clip: VideoClip, lam_model: LatentActionModel, gap: int
) -> list[LatentAction]:
    """Per-step latent actions labeling the clip at a stride of one gap."""
    starts = list(range(0, clip.length - gap, gap))
    windows = torch.from_numpy(
        np.stack([np.stack([clip.frames[t], clip.frames[t + gap]]) for t in starts])
    )
    indices = lam_model.label_windows(windows)
    return [
        LatentAction(
            indices=tuple(int(v) for v in indices[i]),
            embedding=lam_model.vq.lookup(indices[i]).numpy().astype(np.float32),
            source=(clip.clip_id, t, gap),
        )
        for i, t in enumerate(starts)
    ]


def migration_eval(
    source_clips: Sequence[VideoClip],
    target_frames: Sequence[tuple[np.ndarray, Embodiment]],
    lam_model: LatentActionModel,
    world: WorldModel,
    gap: int | None = None,
    seed: int = 0,
    keep_rollouts: int = 0,
) -> tuple[MigrationReport, list[tuple[np.ndarray, np.ndarray]]]:
    """Extract actions from each source clip, replay them on each target frame,
    and score whether the generated motion matches the source direction."""
    gap = gap if gap is not None else lam_model.cfg.gap
    report = MigrationReport()
    strips: list[tuple[np.ndarray, np.ndarray]] = []
    frames = torch.from_numpy(np.stack([f for f, _ in target_frames]))
    for si, clip in enumerate(source_clips):
        actions = clip_action_sequence(clip, lam_model, gap)
        source_kind = worldgen.window_kind(clip, 0, clip.length - 1)
        rollouts = apply_action_sequence_batch(
            frames, actions, world, lam_model, seed=seed + si * 1000
        ).numpy()
        for ti, (_, embodiment) in enumerate(target_frames):
            generated = rollouts[ti]
            color = agent_color(embodiment)
            c0 = sprite_centroid(generated[0], color)
            c1 = sprite_centroid(generated[-1], color)
            failed = c0 is None or c1 is None
            predicted = None
            if not failed:
                dy, dx = circular_displacement(c0, c1)
                predicted = classify_direction(dy, dx)
            report.cases.append(
                MigrationCase(
                    source_clip_id=clip.clip_id,
                    source_kind=source_kind,
                    target_embodiment=embodiment,
                    predicted=predicted,
                    matched=predicted is source_kind,
                    tracker_failed=failed,
                )
            )
            if len(strips) < keep_rollouts:
                strips.append((clip.frames[:: gap], generated))
    return report, strips


def random_direction_baseline(n_directions: int = 4) -> float:
    return 1.0 / n_directions


# --------------------------------------------------------------------------
# multi-object controllability


@dataclass
class ControllabilityProbe:
    action_indices: tuple[int, ...]
    targeted_displacement: float
    off_target_displacements: list[float]


@dataclass
class ControllabilityReport:
    probes: list[ControllabilityProbe] = field(default_factory=list)

    @property
    def targeted_median(self) -> float:
        return float(np.median([p.targeted_displacement for p in self.probes]))

    @property
    def off_target_median(self) -> float:
        values = [d for p in self.probes for d in p.off_target_displacements]
        return float(np.median(values)) if values else 0.0


def multi_object_controllability(
    frame: np.ndarray,
    target_color: np.ndarray,
    off_target_colors: Sequence[np.ndarray],
    actions: Sequence[LatentAction],
    lam_model: LatentActionModel,
    world: WorldModel,
    seed: int = 0,
) -> tuple[ControllabilityReport, list[np.ndarray]]:
    """Apply each probe action to the same frame and measure how far the
    targeted sprite vs every other sprite moved."""
    report = ControllabilityReport()
    generated_frames = []
    base = torch.from_numpy(frame).unsqueeze(0)
    for ai, action in enumerate(actions):
        rollout = apply_action_sequence_batch(
            base, [action], world, lam_model, seed=seed + ai
        ).numpy()[0]
        generated = rollout[-1]
        generated_frames.append(generated)

        def _disp(color: np.ndarray) -> float | None:
            c0 = sprite_centroid(frame, color)
            c1 = sprite_centroid(generated, color)
            if c0 is None or c1 is None:
                return None
            return float(np.linalg.norm(circular_displacement(c0, c1)))

        targeted = _disp(target_color)
        off = [d for c in off_target_colors if (d := _disp(c)) is not None]
        report.probes.append(
            ControllabilityProbe(
                action_indices=action.indices,
                targeted_displacement=targeted if targeted is not None else 0.0,
                off_target_displacements=off,
            )
        )
    return report, generated_frames


# --------------------------------------------------------------------------
# dataset ablation


@dataclass
class AblationEntry:
    name: str
    val_loss: float
    reference: float | None = None


def ablation_report(
    configs: dict[str, Sequence[VideoClip]],
    val_clips: Sequence[VideoClip],
    cfg: LamConfig,
    train_cfg: LamTrainConfig,
    log=print,
) -> list[AblationEntry]:
    """Train one model per training-set configuration (same seed and steps)
    and report held-out validation losses."""
    if len(configs) < 2:
        raise ValueError("ablation needs at least two configurations")
    entries = []
    for name, clips in configs.items():
        log(f"[ablation] training {name!r} on {len(clips)} clips")
        model, _ = train_lam(clips, val_clips, cfg, train_cfg, log_every=0)
        vl = validation_loss(model, val_clips, cfg.gap)
        reference = REFERENCE_FULL_SCALE_VAL_LOSS.get(
            "mixed" if "mixed" in name else "single_source"
        )
        entries.append(AblationEntry(name=name, val_loss=vl, reference=reference))
        log(f"[ablation] {name!r} held-out validation loss {vl:.5f}")
    return entries


# --------------------------------------------------------------------------
# delimited + plain-text report output


def write_csv(path: Path | str, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_table(path: Path | str, rows: Sequence[dict], title: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [title] if title else []
    if rows:
        keys = list(rows[0].keys())
        widths = {k: max(len(k), *(len(_fmt(r[k])) for r in rows)) for k in keys}
        lines.append("  ".join(k.ljust(widths[k]) for k in keys))
        for r in rows:
            lines.append("  ".join(_fmt(r[k]).ljust(widths[k]) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.5f}"
    return str(v)
