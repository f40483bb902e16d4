"""Procedural sprite-world clips with ground-truth actions.

A 32x32 toroidal world containing one agent sprite (whose look depends on the
embodiment) and up to two static distractor sprites. Each episode the agent
performs a single action kind (a move direction with per-step magnitudes, a
grab toggle, or nothing), so every frame window has an unambiguous ground
truth label. On top of episode generation this module implements the video
data pipeline: camera-jitter injection, shakiness scoring, filtering +
stabilization, image-goal pair sampling, and weighted dataset mixing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError

H = W = 32
C = 3
DEFAULT_FRAME_INTERVAL_S = 0.1
SHIFT_SEARCH_RADIUS = 5  # exhaustive integer-shift search window, px


class Embodiment(str, Enum):
    ARM_A = "ARM_A"
    ARM_B = "ARM_B"


class ActionKind(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    GRAB = 4
    NOOP = 5


MOVE_KINDS = (ActionKind.UP, ActionKind.DOWN, ActionKind.LEFT, ActionKind.RIGHT)

# (dy, dx) unit step per kind; y grows downward, x grows rightward.
KIND_DELTAS = {
    ActionKind.UP: (-1, 0),
    ActionKind.DOWN: (1, 0),
    ActionKind.LEFT: (0, -1),
    ActionKind.RIGHT: (0, 1),
    ActionKind.GRAB: (0, 0),
    ActionKind.NOOP: (0, 0),
}

AGENT_COLORS = {
    Embodiment.ARM_A: np.array([1.0, 0.55, 0.1], dtype=np.float32),   # orange plus
    Embodiment.ARM_B: np.array([0.1, 0.8, 1.0], dtype=np.float32),    # cyan ring
}

DISTRACTOR_PALETTE = (
    ("square", np.array([0.15, 0.85, 0.2], dtype=np.float32)),
    ("disc", np.array([0.85, 0.15, 0.8], dtype=np.float32)),
    ("triangle", np.array([0.9, 0.9, 0.12], dtype=np.float32)),
)


@dataclass(frozen=True)
class GroundTruthAction:
    """One environment step of the controlled sprite."""

    sprite_index: int
    kind: ActionKind
    magnitude: float

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        if self.kind in (ActionKind.NOOP, ActionKind.GRAB) and self.magnitude != 0:
            raise ValueError(f"{self.kind.name} must have magnitude 0")


@dataclass
class VideoClip:
    """A frame sequence with interval, embodiment, instruction and optional labels."""

    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    frame_interval_s: float
    embodiment: Embodiment
    instruction: list[int]
    instruction_text: str
    gt_actions: list[GroundTruthAction] | None
    clip_id: str

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 2:
            raise ValueError("clip needs at least 2 frames of shape (T, H, W, C)")
        if self.frame_interval_s <= 0:
            raise ValueError("frame_interval_s must be > 0")
        if self.gt_actions is not None and len(self.gt_actions) != len(self.frames) - 1:
            raise ValueError("gt_actions length must be T - 1")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class DatasetMixture:
    """Weighted mixture over named clip sources."""

    sources: Sequence[tuple[str, float]]
    seed: int = 0

    def normalized_weights(self) -> np.ndarray:
        w = np.asarray([weight for _, weight in self.sources], dtype=np.float64)
        if (w < 0).any():
            raise ConfigError("mixture weights must be >= 0")
        total = w.sum()
        if total <= 0:
            raise ConfigError("mixture weights must not all be zero")
        return w / total


# --------------------------------------------------------------------------
# rendering


def _agent_bitmap(embodiment: Embodiment) -> np.ndarray:
    """9x9 alpha mask of the agent sprite; shape differs per embodiment."""
    m = np.zeros((9, 9), dtype=np.float32)
    if embodiment is Embodiment.ARM_A:
        m[3:6, :] = 1.0
        m[:, 3:6] = 1.0
    else:
        m[:, :] = 1.0
        m[3:6, 3:6] = 0.0
    return m


def _distractor_bitmap(shape: str) -> np.ndarray:
    m = np.zeros((5, 5), dtype=np.float32)
    if shape == "square":
        m[:, :] = 1.0
    elif shape == "disc":
        yy, xx = np.mgrid[0:5, 0:5]
        m[(yy - 2) ** 2 + (xx - 2) ** 2 <= 5] = 1.0
    elif shape == "triangle":
        for r in range(5):
            m[r, 2 - r // 2 : 3 + r // 2] = 1.0
    else:
        raise ValueError(f"unknown distractor shape {shape!r}")
    return m


@dataclass(frozen=True)
class Sprite:
    bitmap: np.ndarray  # (h, w) alpha in [0, 1]
    color: np.ndarray   # (3,)


@dataclass
class WorldState:
    """Renderable simulator state; the agent is sprites[agent_index]."""

    background: np.ndarray          # (H, W, C)
    sprites: list[Sprite]
    positions: list[np.ndarray]     # float (y, x) centers, toroidal
    agent_index: int
    grab_on: bool = False

    def copy(self) -> "WorldState":
        return WorldState(
            background=self.background,
            sprites=list(self.sprites),
            positions=[p.copy() for p in self.positions],
            agent_index=self.agent_index,
            grab_on=self.grab_on,
        )


def _blit(frame: np.ndarray, sprite: Sprite, center_yx: np.ndarray, highlight: bool) -> None:
    h, w = sprite.bitmap.shape
    color = sprite.color
    if highlight:
        color = 0.4 * color + 0.6 * np.ones(3, dtype=np.float32)
    cy, cx = int(round(float(center_yx[0]))), int(round(float(center_yx[1])))
    ys = (cy - h // 2 + np.arange(h)) % H
    xs = (cx - w // 2 + np.arange(w)) % W
    region = frame[np.ix_(ys, xs)]
    alpha = sprite.bitmap[:, :, None]
    frame[np.ix_(ys, xs)] = (1 - alpha) * region + alpha * color


def render(state: WorldState) -> np.ndarray:
    """Render the state to a (H, W, C) float32 frame in [0, 1]."""
    frame = state.background.copy()
    for i, (sprite, pos) in enumerate(zip(state.sprites, state.positions)):
        highlight = state.grab_on and i == state.agent_index
        _blit(frame, sprite, pos, highlight)
    return np.clip(frame, 0.0, 1.0)


def step_state(state: WorldState, dy: float, dx: float, grab: bool) -> WorldState:
    """Advance the simulator one step: translate the agent, optionally toggle grab."""
    out = state.copy()
    pos = out.positions[out.agent_index]
    out.positions[out.agent_index] = np.array(
        [(pos[0] + dy) % H, (pos[1] + dx) % W], dtype=np.float64
    )
    if grab:
        out.grab_on = not out.grab_on
    return out


def _make_background(rng: np.random.Generator) -> np.ndarray:
    """Static textured background: blocks on the patch grid plus mild speckle.

    The speckle keeps single-pixel shifts unambiguous for the shift search
    while staying small enough for a decoder to treat as copyable detail.
    """
    coarse = rng.uniform(0.04, 0.36, size=(8, 8, C)).astype(np.float32)
    bg = np.kron(coarse, np.ones((4, 4, 1), dtype=np.float32))
    bg += rng.uniform(-0.03, 0.03, size=(H, W, C)).astype(np.float32)
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# episode generation

_TOKENS = ("MOVE", "UP", "DOWN", "LEFT", "RIGHT", "GRAB", "STAY")
VOCAB: dict[str, int] = {w: i for i, w in enumerate(_TOKENS)}

_KIND_WORDS = {
    ActionKind.UP: ["MOVE", "UP"],
    ActionKind.DOWN: ["MOVE", "DOWN"],
    ActionKind.LEFT: ["MOVE", "LEFT"],
    ActionKind.RIGHT: ["MOVE", "RIGHT"],
    ActionKind.GRAB: ["GRAB"],
    ActionKind.NOOP: ["STAY"],
}

_KIND_WEIGHTS = {
    ActionKind.UP: 0.19,
    ActionKind.DOWN: 0.19,
    ActionKind.LEFT: 0.19,
    ActionKind.RIGHT: 0.19,
    ActionKind.GRAB: 0.12,
    ActionKind.NOOP: 0.12,
}


def instruction_for_kind(kind: ActionKind) -> tuple[list[int], str]:
    words = _KIND_WORDS[kind]
    return [VOCAB[w] for w in words], " ".join(words)


def _toroidal_dist(a: np.ndarray, b: np.ndarray) -> float:
    d = np.abs(a - b)
    d = np.minimum(d, np.array([H, W]) - d)
    return float(np.hypot(d[0], d[1]))


def initial_state(seed: int, embodiment: Embodiment) -> tuple[WorldState, np.random.Generator]:
    """Build the episode's initial world state; all randomness except the agent's
    rendered appearance comes from `seed`, so ARM_A/ARM_B twins share layout."""
    rng = np.random.default_rng(seed)
    background = _make_background(rng)
    agent_pos = rng.integers(0, H, size=2).astype(np.float64)
    n_distractors = int(rng.integers(0, 3))
    positions = [agent_pos]
    sprites = [Sprite(_agent_bitmap(embodiment), AGENT_COLORS[embodiment])]
    palette_order = rng.permutation(len(DISTRACTOR_PALETTE))
    placed = 0
    attempts = 0
    while placed < n_distractors and attempts < 64:
        attempts += 1
        cand = rng.integers(0, H, size=2).astype(np.float64)
        if all(_toroidal_dist(cand, p) >= 9.0 for p in positions):
            shape, color = DISTRACTOR_PALETTE[palette_order[placed]]
            sprites.append(Sprite(_distractor_bitmap(shape), color))
            positions.append(cand)
            placed += 1
    return WorldState(background, sprites, positions, agent_index=0), rng


def generate_episode(seed: int, embodiment: Embodiment, length: int = 14) -> VideoClip:
    """Deterministically generate one single-kind episode of `length` frames."""
    if length < 2:
        raise ValueError("length must be >= 2")
    state, rng = initial_state(seed, embodiment)

    kinds = list(_KIND_WEIGHTS)
    weights = np.array([_KIND_WEIGHTS[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]

    # constant per-episode speed, so a short stride context reveals it
    magnitude = float(rng.integers(1, 3)) if kind in MOVE_KINDS else 0.0

    frames = [render(state)]
    actions: list[GroundTruthAction] = []
    for _ in range(length - 1):
        dy, dx = KIND_DELTAS[kind]
        state = step_state(state, dy * magnitude, dx * magnitude, kind is ActionKind.GRAB)
        frames.append(render(state))
        actions.append(GroundTruthAction(state.agent_index, kind, magnitude))

    tokens, text = instruction_for_kind(kind)
    return VideoClip(
        frames=np.stack(frames).astype(np.float32),
        frame_interval_s=DEFAULT_FRAME_INTERVAL_S,
        embodiment=embodiment,
        instruction=tokens,
        instruction_text=text,
        gt_actions=actions,
        clip_id=f"{embodiment.value}-{seed:08d}",
    )


# --------------------------------------------------------------------------
# jitter, shakiness, stabilization


def translate_frame(frame: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by (dx right, dy down), filling revealed edges by replication."""
    ys = np.clip(np.arange(H) - dy, 0, H - 1)
    xs = np.clip(np.arange(W) - dx, 0, W - 1)
    return frame[np.ix_(ys, xs)]


def inject_camera_jitter(clip: VideoClip, magnitude: int, seed: int) -> VideoClip:
    """Translate each frame by an independent integer offset in [-magnitude, magnitude]^2."""
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if magnitude == 0:
        return clip
    rng = np.random.default_rng(seed)
    offsets = rng.integers(-magnitude, magnitude + 1, size=(clip.length, 2))
    frames = np.stack(
        [translate_frame(f, int(ox), int(oy)) for f, (ox, oy) in zip(clip.frames, offsets)]
    )
    return replace(clip, frames=frames.astype(np.float32))


def estimate_shift(a: np.ndarray, b: np.ndarray, radius: int = SHIFT_SEARCH_RADIUS) -> tuple[int, int]:
    """Exhaustive integer search for the (dx, dy) with translate(a, dx, dy) closest to b.

    Scored by mean absolute difference, which is robust to the few bright
    moving-sprite pixels, so the static background dominates the estimate.
    All (2r+1)^2 candidate shifts are evaluated in one vectorized pass over an
    edge-padded sliding window; window (i, j) equals
    translate(a, radius - j, radius - i) exactly.
    """
    padded = np.pad(a, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (H, W), axis=(0, 1))
    err = np.abs(windows - b.transpose(2, 0, 1)[None, None]).mean(axis=(2, 3, 4))
    i, j = np.unravel_index(int(err.argmin()), err.shape)
    return radius - j, radius - i


def shakiness_score(clip: VideoClip) -> float:
    """Mean magnitude of the estimated global translation between consecutive frames."""
    mags = []
    for t in range(clip.length - 1):
        dx, dy = estimate_shift(clip.frames[t], clip.frames[t + 1])
        mags.append(float(np.hypot(dx, dy)))
    return float(np.mean(mags))


@dataclass
class StabilizationResult:
    clips: list[VideoClip]
    dropped_fraction: float
    scores: list[float] = field(default_factory=list)


def stabilize_clip(clip: VideoClip) -> VideoClip:
    """Undo the estimated per-frame global shift, anchoring on the first frame.

    Each frame is aligned to frame 0 directly, so estimation errors do not
    accumulate; recovery is exact up to the first frame's own offset and
    border replication.
    """
    stabilized = [clip.frames[0]]
    for t in range(1, clip.length):
        dx, dy = estimate_shift(clip.frames[0], clip.frames[t])
        stabilized.append(translate_frame(clip.frames[t], -dx, -dy))
    return replace(clip, frames=np.stack(stabilized).astype(np.float32))


def filter_and_stabilize(clips: Sequence[VideoClip], threshold: float) -> StabilizationResult:
    """Drop clips whose shakiness exceeds `threshold`, stabilize the rest."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if not clips:
        return StabilizationResult(clips=[], dropped_fraction=0.0)
    scores = [shakiness_score(c) for c in clips]
    kept = [stabilize_clip(c) for c, s in zip(clips, scores) if s <= threshold]
    return StabilizationResult(
        clips=kept,
        dropped_fraction=1.0 - len(kept) / len(clips),
        scores=scores,
    )


def shakiness_threshold(scores: Sequence[float], keep_fraction: float = 0.6) -> float:
    """Quantile threshold so that roughly `keep_fraction` of clips survive."""
    return float(np.quantile(np.asarray(scores, dtype=np.float64), keep_fraction))


# --------------------------------------------------------------------------
# pair sampling and mixing


def gap_range_for_interval(
    frame_interval_s: float, min_s: float = 0.1, max_s: float = 0.5
) -> tuple[int, int]:
    """Integer gaps g with g * frame_interval_s inside [min_s, max_s]."""
    lo = int(np.ceil(min_s / frame_interval_s - 1e-9))
    hi = int(np.floor(max_s / frame_interval_s + 1e-9))
    return max(lo, 1), hi


def sample_pairs(
    clip: VideoClip, gap_range: tuple[int, int], seed: int = 0
) -> list[tuple[int, int]]:
    """(t, t+g) index pairs covering every valid t; g drawn uniformly in the range.

    With a degenerate range (g, g) this is the deterministic full sweep of
    T - g pairs.
    """
    lo, hi = gap_range
    if lo < 1 or hi < lo:
        raise ValueError("gap range must satisfy 1 <= lo <= hi")
    T = clip.length
    if lo > T - 1:
        return []
    rng = np.random.default_rng(seed)
    pairs = []
    for t in range(T - lo):
        g_hi = min(hi, T - 1 - t)
        g = lo if g_hi == lo else int(rng.integers(lo, g_hi + 1))
        pairs.append((t, t + g))
    return pairs


def mixture_stream(
    mixture: DatasetMixture, datasets: Mapping[str, Sequence[VideoClip]]
) -> Iterator[VideoClip]:
    """Infinite stream drawing a source i.i.d. per clip with the mixture weights."""
    for dataset_id, _ in mixture.sources:
        if dataset_id not in datasets:
            raise ConfigError(f"unknown dataset_id {dataset_id!r}")
    weights = mixture.normalized_weights()
    ids = [dataset_id for dataset_id, _ in mixture.sources]
    rng = np.random.default_rng(mixture.seed)
    for _ in itertools.count():
        source = ids[int(rng.choice(len(ids), p=weights))]
        clips = datasets[source]
        yield clips[int(rng.integers(0, len(clips)))]


# --------------------------------------------------------------------------
# ground-truth window summaries (used by labeling and evaluation)


def window_kind(clip: VideoClip, t: int, gap: int) -> ActionKind:
    """Majority action kind across the steps spanned by (t, t+gap)."""
    if clip.gt_actions is None:
        raise ValueError("clip has no ground-truth actions")
    kinds = [clip.gt_actions[i].kind for i in range(t, t + gap)]
    values, counts = np.unique([int(k) for k in kinds], return_counts=True)
    return ActionKind(int(values[np.argmax(counts)]))


def window_continuous_action(clip: VideoClip, t: int, gap: int) -> np.ndarray:
    """Net (dx, dy, grab) over the window; grab is +1 for an odd toggle count else -1."""
    if clip.gt_actions is None:
        raise ValueError("clip has no ground-truth actions")
    dx = dy = 0.0
    grabs = 0
    for i in range(t, t + gap):
        a = clip.gt_actions[i]
        sy, sx = KIND_DELTAS[a.kind]
        dx += sx * a.magnitude
        dy += sy * a.magnitude
        grabs += a.kind is ActionKind.GRAB
    return np.array([dx, dy, 1.0 if grabs % 2 else -1.0], dtype=np.float32)
