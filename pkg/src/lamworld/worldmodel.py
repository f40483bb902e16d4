"""Action-conditioned future-frame prediction with a rectified flow.

The model regresses the constant velocity (noise minus data) along the linear
path between clean future frames and Gaussian noise. Conditioning enters three
ways: history frames share the token grid, per-frame action tokens are read
through cross-attention, and the single-frame decoder's chained coarse
predictions are added element-wise to the noisy input. Sampling integrates the
learned field from pure noise back to data with uniform Euler steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import worldgen
from .datafmt import PairLabel
from .errors import TrainingDiverged
from .lam import LamConfig, LatentAction, LatentActionModel, TrainCurve
from .nnkit import (
    CrossAttention,
    PatchDecode,
    PatchEmbed,
    SpatioTemporalBlock,
    seed_all,
    sinusoidal_features,
)
from .worldgen import VideoClip


def interpolate(x0: torch.Tensor, x1: torch.Tensor, n: torch.Tensor | float) -> torch.Tensor:
    """Exact affine blend (1 - n) * x0 + n * x1 along the flow path."""
    if x0.shape != x1.shape:
        raise ValueError("x0 and x1 must have equal shapes")
    if isinstance(n, (int, float)):
        n = torch.tensor(float(n), dtype=x0.dtype)
    if ((n < 0) | (n > 1)).any():
        raise ValueError("n must lie in [0, 1]")
    while n.ndim < x0.ndim:
        n = n.unsqueeze(-1)
    return (1 - n) * x0 + n * x1


@dataclass
class FlowBatch:
    """(clean data, noise, path position, interpolated state) quadruple."""

    x0: torch.Tensor
    x1: torch.Tensor
    n: torch.Tensor  # (B,)
    xn: torch.Tensor

    @classmethod
    def make(cls, x0: torch.Tensor, n: torch.Tensor, generator: torch.Generator) -> "FlowBatch":
        x1 = torch.randn(x0.shape, generator=generator)
        return cls(x0=x0, x1=x1, n=n, xn=interpolate(x0, x1, n))


@dataclass
class ConditioningPack:
    """Everything the velocity network sees besides the noisy state.

    `action_tokens` holds one embedding per modeled frame (history then future,
    each the action leading out of that frame); the final slot is always the
    zero vector since the last frame has no outgoing action.
    """

    history: torch.Tensor        # (B, Th, H, W, C)
    action_tokens: torch.Tensor  # (B, Th + F, N, D)
    coarse: torch.Tensor         # (B, F, H, W, C)

    def __post_init__(self):
        if not torch.all(self.action_tokens[:, -1] == 0):
            raise ValueError("final action slot must be the zero vector")


def build_pack(
    history: torch.Tensor, actions: torch.Tensor, coarse: torch.Tensor
) -> ConditioningPack:
    """Assemble a pack from (B, F, N, D) per-future-step actions, zero-padding
    the trailing slot for the final generated frame."""
    b, f, n_tok, d = actions.shape
    zero = torch.zeros(b, 1, n_tok, d, dtype=actions.dtype)
    return ConditioningPack(history=history, action_tokens=torch.cat([actions, zero], 1), coarse=coarse)


@dataclass(frozen=True)
class WorldModelConfig:
    lam: LamConfig = LamConfig()
    width: int = 48
    heads: int = 4
    blocks: int = 2
    max_frames: int = 8
    euler_steps: int = 20


class VelocityNet(nn.Module):
    """Spatio-temporal backbone predicting the flow velocity at future frames."""

    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        lam_cfg = cfg.lam
        act_dim = lam_cfg.codebook.num_tokens * lam_cfg.codebook.code_dim
        self.hist_embed = PatchEmbed(lam_cfg.patch, lam_cfg.channels, cfg.width, lam_cfg.image_hw)
        self.future_embed = PatchEmbed(lam_cfg.patch, lam_cfg.channels, cfg.width, lam_cfg.image_hw)
        self.time_pos = nn.Parameter(torch.zeros(cfg.max_frames, cfg.width))
        nn.init.trunc_normal_(self.time_pos, std=0.02)
        self.n_proj = nn.Linear(cfg.width, cfg.width)
        self.action_proj = nn.Linear(act_dim, cfg.width)
        self.slot_pos = nn.Parameter(torch.zeros(cfg.max_frames + 1, cfg.width))
        nn.init.trunc_normal_(self.slot_pos, std=0.02)
        self.blocks = nn.ModuleList(
            SpatioTemporalBlock(cfg.width, cfg.heads) for _ in range(cfg.blocks)
        )
        self.cross_norms = nn.ModuleList(nn.LayerNorm(cfg.width) for _ in range(cfg.blocks))
        self.cross_attns = nn.ModuleList(
            CrossAttention(cfg.width, cfg.heads) for _ in range(cfg.blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.width)
        self.decode = PatchDecode(lam_cfg.patch, lam_cfg.channels, cfg.width, lam_cfg.image_hw)

    def forward(self, xn: torch.Tensor, n: torch.Tensor, pack: ConditioningPack) -> torch.Tensor:
        """(B, F, H, W, C) noisy future + (B,) position + pack -> velocity."""
        b, f = xn.shape[:2]
        th = pack.history.shape[1]
        noisy = xn + pack.coarse  # element-wise coarse conditioning
        grid = torch.cat([self.hist_embed(pack.history), self.future_embed(noisy)], dim=1)
        grid = grid + self.time_pos[: th + f].reshape(1, th + f, 1, -1)
        n_feat = self.n_proj(sinusoidal_features(n, self.cfg.width))
        grid = grid + n_feat.reshape(b, 1, 1, -1)
        slots = self.action_proj(pack.action_tokens.reshape(b, -1, self.action_proj.in_features))
        slots = slots + self.slot_pos[: slots.shape[1]]
        l = grid.shape[2]
        for block, norm, cross in zip(self.blocks, self.cross_norms, self.cross_attns):
            grid = block(grid)
            q = norm(grid.reshape(b, (th + f) * l, -1))
            grid = grid + cross(q, slots).reshape(b, th + f, l, -1)
        future = self.out_norm(grid[:, th:])
        return self.decode(future, bounded=False)


def euler_integrate(
    velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
    x_init: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """Integrate dx/dn = v from n=1 (noise) down to n=0 in uniform steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = x_init
    dn = 1.0 / steps
    for k in range(steps):
        n_k = 1.0 - k * dn
        x = x - dn * velocity_fn(x, n_k)
    return x


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        self.net = VelocityNet(cfg)

    def velocity_loss(self, batch: FlowBatch, pack: ConditioningPack) -> torch.Tensor:
        v = self.net(batch.xn, batch.n, pack)
        loss = F.mse_loss(v, batch.x1 - batch.x0)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite velocity loss at n={batch.n.tolist()}")
        return loss

    def euler_sample(
        self, pack: ConditioningPack, steps: int | None = None, seed: int = 0
    ) -> torch.Tensor:
        """Generate the future block; deterministic given the seed."""
        steps = steps if steps is not None else self.cfg.euler_steps
        b, f = pack.coarse.shape[:2]
        gen = torch.Generator().manual_seed(seed)
        x1 = torch.randn(pack.coarse.shape, generator=gen)
        with torch.no_grad():
            x = euler_integrate(
                lambda x, n_k: self.net(x, torch.full((b,), n_k), pack), x1, steps
            )
        return x.clamp(0.0, 1.0)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class WorldTrainConfig:
    batch_size: int = 16
    steps: int = 2600
    learning_rate: float = 3e-4
    seed: int = 0
    horizon_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)  # P(h = 1..4)
    divergence_factor: float = 10.0
    divergence_patience: int = 500


FULL_SCALE_WORLD_TRAIN = {"batch_size": 12, "steps": 48_000, "learning_rate": 1e-4}


@dataclass
class LabeledWindows:
    """Index of rollout windows (clip, t0, horizon) available in a labeled set."""

    clips: Sequence[VideoClip]
    labels: dict[str, list[PairLabel]]
    gap: int

    def __post_init__(self):
        self.by_clip_t: dict[tuple[int, int], PairLabel] = {}
        for ci, clip in enumerate(self.clips):
            for p in self.labels.get(clip.clip_id, []):
                if p.gap == self.gap:
                    self.by_clip_t[(ci, p.t)] = p

    def starts(self, horizon: int) -> list[tuple[int, int]]:
        out = []
        for ci, clip in enumerate(self.clips):
            max_t0 = clip.length - 1 - horizon * self.gap
            for t0 in range(0, max_t0 + 1):
                if all((ci, t0 + k * self.gap) in self.by_clip_t for k in range(horizon)):
                    out.append((ci, t0))
        return out

    def window(
        self, ci: int, t0: int, horizon: int, lam_model: LatentActionModel
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(history frame, future frames, action embeddings) for one window."""
        clip = self.clips[ci]
        idx = [t0 + k * self.gap for k in range(horizon + 1)]
        frames = clip.frames[idx]
        emb = np.stack(
            [
                lam_model.vq.lookup(
                    torch.tensor(self.by_clip_t[(ci, t0 + k * self.gap)].indices)
                ).detach().numpy()
                for k in range(horizon)
            ]
        )
        return frames[0], frames[1:], emb.astype(np.float32)


def chained_coarse(
    lam_model: LatentActionModel, history: torch.Tensor, actions: torch.Tensor
) -> torch.Tensor:
    """FDM predictions chained forward from the last history frame.

    history (B, H, W, C), actions (B, F, N, D) -> (B, F, H, W, C).
    """
    with torch.no_grad():
        frames = []
        current = history
        for k in range(actions.shape[1]):
            current = lam_model.fdm(current, actions[:, k])
            frames.append(current)
    return torch.stack(frames, dim=1)


def make_training_batch(
    windows: LabeledWindows,
    lam_model: LatentActionModel,
    starts: list[tuple[int, int]],
    idx: Sequence[int],
    horizon: int,
) -> tuple[torch.Tensor, ConditioningPack]:
    hist, fut, act = [], [], []
    for i in idx:
        ci, t0 = starts[i]
        h, f, a = windows.window(ci, t0, horizon, lam_model)
        hist.append(h)
        fut.append(f)
        act.append(a)
    history = torch.from_numpy(np.stack(hist))
    x0 = torch.from_numpy(np.stack(fut))
    actions = torch.from_numpy(np.stack(act))
    coarse = chained_coarse(lam_model, history, actions)
    pack = build_pack(history.unsqueeze(1), actions, coarse)
    return x0, pack


def train_world(
    clips: Sequence[VideoClip],
    labels: dict[str, list[PairLabel]],
    lam_model: LatentActionModel,
    cfg: WorldModelConfig,
    train_cfg: WorldTrainConfig,
    log_every: int = 200,
    log=print,
) -> tuple[WorldModel, TrainCurve]:
    gen = seed_all(train_cfg.seed)
    model = WorldModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)
    windows = LabeledWindows(clips, labels, cfg.lam.gap)
    starts_by_h = {h: windows.starts(h) for h in range(1, len(train_cfg.horizon_weights) + 1)}
    horizons = [h for h, s in starts_by_h.items() if s]
    weights = np.array([train_cfg.horizon_weights[h - 1] for h in horizons])
    weights = weights / weights.sum()
    curve = TrainCurve()
    initial_loss = None
    bad_steps = 0
    t_start = time.time()
    lam_model.eval()
    for step in range(train_cfg.steps):
        h = int(rng.choice(horizons, p=weights))
        starts = starts_by_h[h]
        idx = rng.integers(0, len(starts), size=train_cfg.batch_size).tolist()
        x0, pack = make_training_batch(windows, lam_model, starts, idx, h)
        n = torch.rand(x0.shape[0], generator=gen)
        batch = FlowBatch.make(x0, n, gen)
        loss = model.velocity_loss(batch, pack)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

        loss_val = float(loss.detach())
        curve.steps.append(step)
        curve.total.append(loss_val)
        curve.recon.append(loss_val)
        curve.commit.append(0.0)
        if initial_loss is None:
            initial_loss = loss_val
        if loss_val > train_cfg.divergence_factor * initial_loss:
            bad_steps += 1
            if bad_steps >= train_cfg.divergence_patience:
                raise TrainingDiverged(
                    f"velocity loss {loss_val:.4f} stayed above "
                    f"{train_cfg.divergence_factor}x initial for {bad_steps} steps"
                )
        else:
            bad_steps = 0
        if log_every and (step + 1) % log_every == 0:
            log(
                f"step {step + 1}/{train_cfg.steps} velocity loss {loss_val:.4f} "
                f"({time.time() - t_start:.0f}s)"
            )
    model.eval()
    return model, curve


# --------------------------------------------------------------------------
# rollout


def apply_action_sequence_batch(
    initial_frames: torch.Tensor,
    actions: Sequence[LatentAction],
    world: WorldModel,
    lam_model: LatentActionModel,
    steps: int | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Apply one latent action sequence to a batch of initial frames.

    Returns (B, len(actions) + 1, H, W, C); each step conditions on the last
    generated frame only and advances the sampling seed.
    """
    if len(actions) == 0:
        raise ValueError("actions must be nonempty")
    b = initial_frames.shape[0]
    current = initial_frames
    out = [current]
    for k, action in enumerate(actions):
        emb = torch.from_numpy(action.embedding).expand(b, 1, -1, -1)
        coarse = chained_coarse(lam_model, current, emb)
        pack = build_pack(current.unsqueeze(1), emb, coarse)
        block = world.euler_sample(pack, steps=steps, seed=seed + k)
        current = block[:, -1]
        out.append(current)
    return torch.stack(out, dim=1)


def apply_action_sequence(
    initial_frame: np.ndarray,
    actions: Sequence[LatentAction],
    world: WorldModel,
    lam_model: LatentActionModel,
    steps: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Autoregressively roll one frame per latent action; returns (len+1, H, W, C)."""
    frames = apply_action_sequence_batch(
        torch.from_numpy(initial_frame).unsqueeze(0), actions, world, lam_model, steps, seed
    )
    return frames[0].numpy()
