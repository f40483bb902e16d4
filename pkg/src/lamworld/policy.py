"""Two-stage policy: latent-action regression, then low-level action decoding.

Stage one regresses the next quantized action embedding from the instruction
and the observation history. Stage two decodes a short chunk of continuous
environment actions (dx, dy, grab) from the same inputs plus the stage-one
prediction, with every stage-one and instruction-encoder parameter frozen. A
scratch variant of stage two (no latent-action input, everything trainable)
serves as the low-data comparison baseline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import worldgen
from .datafmt import PairLabel
from .errors import TrainingDiverged, VocabularyError
from .lam import LamConfig, LatentAction, LatentActionModel, TrainCurve
from .nnkit import PatchEmbed, ReadoutTokens, SpatioTemporalBlock, seed_all
from .worldgen import ActionKind, VideoClip, WorldState
from .worldmodel import WorldModel, apply_action_sequence

PAD_ID = len(worldgen.VOCAB)
MAX_INSTRUCTION_LEN = 2
ACTION_DIM = 3  # (dx, dy, grab); grab is +-1


@dataclass(frozen=True)
class PolicyConfig:
    lam: LamConfig = LamConfig()
    width: int = 48
    heads: int = 4
    blocks: int = 2
    context: int = 2  # frames, spaced one gap apart
    chunk_len: int = 3  # environment actions decoded per latent action


FULL_SCALE_POLICY_TRAIN = {
    "blocks": 12, "heads": 12, "width": 768,
    "batch_size": 128, "steps": 124_000, "learning_rate": 1e-4,
}
FULL_SCALE_LOWLEVEL_TRAIN = {"batch_size": 128, "steps": 32_000, "learning_rate": 1e-4}


def pad_instruction(tokens: Sequence[int]) -> list[int]:
    if not tokens:
        raise VocabularyError("instruction must be nonempty")
    for t in tokens:
        if not (0 <= t < len(worldgen.VOCAB)):
            raise VocabularyError(f"token id {t} outside vocabulary")
    out = list(tokens)[:MAX_INSTRUCTION_LEN]
    return out + [PAD_ID] * (MAX_INSTRUCTION_LEN - len(out))


@dataclass
class PolicyOutput:
    predicted: np.ndarray  # (N, D) pre-quantization regression
    snapped: LatentAction | None = None


def snap_to_codebook(predicted: torch.Tensor, lam_model: LatentActionModel) -> LatentAction:
    """Replace each token row by its nearest codebook row."""
    indices = lam_model.vq.nearest_indices(predicted)
    rows = lam_model.vq.lookup(indices)
    return LatentAction(
        indices=tuple(int(i) for i in indices),
        embedding=rows.detach().numpy().astype(np.float32),
    )


class InstructionEncoder(nn.Module):
    """Learned embedding table over the closed instruction vocabulary."""

    def __init__(self, dim: int):
        super().__init__()
        self.table = nn.Embedding(len(worldgen.VOCAB) + 1, dim)  # +1 pad slot

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.table(token_ids)


class FoundationPolicy(nn.Module):
    """Instruction + frame history -> per-step predicted action embedding."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        lam_cfg = cfg.lam
        self.instruction_encoder = InstructionEncoder(cfg.width)
        self.embed = PatchEmbed(lam_cfg.patch, lam_cfg.channels, cfg.width, lam_cfg.image_hw)
        self.readout = ReadoutTokens(1, cfg.width)
        self.blocks = nn.ModuleList(
            SpatioTemporalBlock(cfg.width, cfg.heads) for _ in range(cfg.blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.width)
        n, d = lam_cfg.codebook.num_tokens, lam_cfg.codebook.code_dim
        self.head = nn.Linear(cfg.width, n * d)

    def forward(self, token_ids: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """(B, ell) ids + (B, T, H, W, C) frames -> (B, T, N, D) predictions."""
        b, t = frames.shape[:2]
        instr = self.instruction_encoder(token_ids).unsqueeze(1).expand(b, t, -1, -1)
        grid = torch.cat([instr, self.embed(frames)], dim=2)
        grid = self.readout.append(grid)
        for block in self.blocks:
            grid = block(grid)
        summary = self.out_norm(self.readout.take(grid)[:, :, 0, :])  # (B, T, E)
        n, d = self.cfg.lam.codebook.num_tokens, self.cfg.lam.codebook.code_dim
        return self.head(summary).reshape(b, t, n, d)


def policy_forward(
    model: FoundationPolicy,
    instruction: Sequence[int],
    frames: np.ndarray | torch.Tensor,
    lam_model: LatentActionModel | None = None,
) -> PolicyOutput:
    """Predict the next action embedding from the final history step."""
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("need at least one history frame")
    ids = torch.tensor([pad_instruction(instruction)])
    with torch.no_grad():
        pred = model(ids, frames.unsqueeze(0))[0, -1]
    snapped = snap_to_codebook(pred, lam_model) if lam_model is not None else None
    return PolicyOutput(predicted=pred.numpy().astype(np.float32), snapped=snapped)


class LowLevelPolicy(nn.Module):
    """Decodes a chunk of continuous environment actions.

    In the pretrained configuration the frozen upper stack supplies the
    predicted latent action as an extra patch-level token; the scratch
    configuration omits that token and trains everything.
    """

    def __init__(self, cfg: PolicyConfig, foundation: FoundationPolicy | None, use_latent: bool = True):
        super().__init__()
        if use_latent and foundation is None:
            raise ValueError("pretrained configuration requires the foundation policy")
        self.cfg = cfg
        self.use_latent = use_latent
        self.foundation = foundation
        lam_cfg = cfg.lam
        if use_latent:
            # the upper stack (including its instruction encoder) stays frozen
            for p in foundation.parameters():
                p.requires_grad_(False)
            self.instruction_encoder = foundation.instruction_encoder
        else:
            self.instruction_encoder = InstructionEncoder(cfg.width)
        n, d = lam_cfg.codebook.num_tokens, lam_cfg.codebook.code_dim
        self.embed = PatchEmbed(lam_cfg.patch, lam_cfg.channels, cfg.width, lam_cfg.image_hw)
        self.latent_in = nn.Linear(n * d, cfg.width) if use_latent else None
        self.readout = ReadoutTokens(1, cfg.width)
        self.blocks = nn.ModuleList(
            SpatioTemporalBlock(cfg.width, cfg.heads) for _ in range(cfg.blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.chunk_len * ACTION_DIM)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(
        self, token_ids: torch.Tensor, frames: torch.Tensor, latent: torch.Tensor | None = None
    ) -> torch.Tensor:
        """(B, ell) ids + (B, T, H, W, C) frames -> (B, chunk_len, ACTION_DIM)."""
        b, t = frames.shape[:2]
        if self.use_latent:
            if latent is None:
                with torch.no_grad():
                    latent = self.foundation(token_ids, frames)[:, -1]
            latent = latent.reshape(b, -1).detach()
        instr = self.instruction_encoder(token_ids)
        if self.use_latent:
            instr = instr.detach()
        parts = [instr.unsqueeze(1).expand(b, t, -1, -1)]
        if self.use_latent:
            parts.append(self.latent_in(latent).reshape(b, 1, 1, -1).expand(b, t, 1, -1))
        parts.append(self.embed(frames))
        grid = self.readout.append(torch.cat(parts, dim=2))
        for block in self.blocks:
            grid = block(grid)
        summary = self.out_norm(self.readout.take(grid)[:, -1, 0, :])
        return self.head(summary).reshape(b, self.cfg.chunk_len, ACTION_DIM)


def lowlevel_forward(
    model: LowLevelPolicy, instruction: Sequence[int], frames: np.ndarray | torch.Tensor
) -> np.ndarray:
    """Emit one chunk of environment actions for the current history."""
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(frames)
    ids = torch.tensor([pad_instruction(instruction)])
    with torch.no_grad():
        chunk = model(ids, frames.unsqueeze(0))[0]
    return chunk.numpy().astype(np.float32)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class PolicyTrainConfig:
    batch_size: int = 32
    steps: int = 1400
    learning_rate: float = 3e-4
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 500


@dataclass
class PolicyWindows:
    """(clip, t0) windows with full context and a latent-action label."""

    clips: Sequence[VideoClip]
    labels: dict[str, list[PairLabel]]
    cfg: PolicyConfig

    def __post_init__(self):
        gap = self.cfg.lam.gap
        self.entries: list[tuple[int, int, PairLabel]] = []
        for ci, clip in enumerate(self.clips):
            by_t = {p.t: p for p in self.labels.get(clip.clip_id, []) if p.gap == gap}
            min_t0 = (self.cfg.context - 1) * gap
            for t0, p in sorted(by_t.items()):
                if t0 >= min_t0:
                    self.entries.append((ci, t0, p))

    def __len__(self):
        return len(self.entries)

    def batch(
        self, idx: Sequence[int], lam_model: LatentActionModel
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        gap = self.cfg.lam.gap
        ids, frames, targets = [], [], []
        for i in idx:
            ci, t0, p = self.entries[i]
            clip = self.clips[ci]
            ids.append(pad_instruction(clip.instruction))
            ctx = [t0 - k * gap for k in reversed(range(self.cfg.context))]
            frames.append(clip.frames[ctx])
            targets.append(lam_model.vq.lookup(torch.tensor(p.indices)).numpy())
        return (
            torch.tensor(ids),
            torch.from_numpy(np.stack(frames)),
            torch.from_numpy(np.stack(targets).astype(np.float32)),
        )


def train_policy(
    clips: Sequence[VideoClip],
    labels: dict[str, list[PairLabel]],
    lam_model: LatentActionModel,
    cfg: PolicyConfig,
    train_cfg: PolicyTrainConfig,
    log_every: int = 200,
    log=print,
) -> tuple[FoundationPolicy, TrainCurve]:
    """Regress labeled action embeddings from instruction plus history."""
    seed_all(train_cfg.seed)
    model = FoundationPolicy(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)
    windows = PolicyWindows(clips, labels, cfg)
    if len(windows) == 0:
        raise ValueError("no labeled policy windows")
    curve = TrainCurve()
    initial_loss = None
    bad_steps = 0
    t_start = time.time()
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(windows), size=train_cfg.batch_size).tolist()
        ids, frames, targets = windows.batch(idx, lam_model)
        pred = model(ids, frames)[:, -1]
        loss = F.mse_loss(pred, targets)
        if not torch.isfinite(loss):
            raise TrainingDiverged("non-finite policy loss")
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
                raise TrainingDiverged("policy loss diverged")
        else:
            bad_steps = 0
        if log_every and (step + 1) % log_every == 0:
            log(f"step {step + 1}/{train_cfg.steps} policy loss {loss_val:.5f} "
                f"({time.time() - t_start:.0f}s)")
    model.eval()
    return model, curve


def chunk_targets(clip: VideoClip, t0: int, chunk_len: int) -> np.ndarray:
    """Continuous (dx, dy, grab) targets for the chunk starting at frame t0."""
    rows = []
    for k in range(chunk_len):
        a = clip.gt_actions[t0 + k]
        sy, sx = worldgen.KIND_DELTAS[a.kind]
        rows.append([sx * a.magnitude, sy * a.magnitude, 1.0 if a.kind is ActionKind.GRAB else -1.0])
    return np.array(rows, dtype=np.float32)


def train_lowlevel(
    clips: Sequence[VideoClip],
    cfg: PolicyConfig,
    train_cfg: PolicyTrainConfig,
    foundation: FoundationPolicy | None,
    use_latent: bool = True,
    log_every: int = 0,
    log=print,
) -> tuple[LowLevelPolicy, TrainCurve]:
    """Finetune the chunk decoder on a (typically small) clip split."""
    seed_all(train_cfg.seed)
    model = LowLevelPolicy(cfg, foundation, use_latent=use_latent)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)
    gap = cfg.lam.gap
    min_t0 = (cfg.context - 1) * gap
    entries = [
        (ci, t0)
        for ci, clip in enumerate(clips)
        for t0 in range(min_t0, clip.length - cfg.chunk_len)
    ]
    if not entries:
        raise ValueError("no finetune windows")
    curve = TrainCurve()
    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(entries), size=min(train_cfg.batch_size, len(entries)))
        ids, frames, targets = [], [], []
        for i in idx:
            ci, t0 = entries[int(i)]
            clip = clips[ci]
            ids.append(pad_instruction(clip.instruction))
            ctx = [t0 - k * gap for k in reversed(range(cfg.context))]
            frames.append(clip.frames[ctx])
            targets.append(chunk_targets(clip, t0, cfg.chunk_len))
        pred = model(torch.tensor(ids), torch.from_numpy(np.stack(frames)))
        loss = F.mse_loss(pred, torch.from_numpy(np.stack(targets)))
        if not torch.isfinite(loss):
            raise TrainingDiverged("non-finite low-level loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
        curve.steps.append(step)
        curve.total.append(loss_val)
        curve.recon.append(loss_val)
        curve.commit.append(0.0)
        if log_every and (step + 1) % log_every == 0:
            log(f"step {step + 1}/{train_cfg.steps} low-level loss {loss_val:.5f}")
    model.eval()
    return model, curve


# --------------------------------------------------------------------------
# closed-loop rollouts


def rollout_policy_in_env(
    instruction: Sequence[int],
    state: WorldState,
    lowlevel: LowLevelPolicy,
    horizon: int,
    gap: int,
) -> tuple[list[WorldState], np.ndarray]:
    """Run the low-level policy in the simulator for `horizon` latent steps."""
    states = [state]
    frames = [worldgen.render(state)]
    for _ in range(horizon):
        stride_frames = frames[::-gap][: lowlevel.cfg.context][::-1]
        ctx = np.stack(stride_frames)
        chunk = lowlevel_forward(lowlevel, instruction, ctx)
        for u in chunk:
            state = worldgen.step_state(state, dy=float(u[1]), dx=float(u[0]), grab=bool(u[2] > 0))
            states.append(state)
            frames.append(worldgen.render(state))
    return states, np.stack(frames)


def env_task_success(states: Sequence[WorldState], kind: ActionKind, min_px: float = 2.0) -> bool:
    """Did the agent's net motion match the instructed direction?"""
    start = states[0].positions[states[0].agent_index]
    end = states[-1].positions[states[-1].agent_index]
    dy = (end[0] - start[0] + worldgen.H / 2) % worldgen.H - worldgen.H / 2
    dx = (end[1] - start[1] + worldgen.W / 2) % worldgen.W - worldgen.W / 2
    sy, sx = worldgen.KIND_DELTAS[kind]
    along = dx * sx + dy * sy
    across = abs(dx * sy) + abs(dy * sx)
    return along >= min_px and along > across


def rollout_policy_in_world(
    instruction: Sequence[int],
    initial_frame: np.ndarray,
    foundation: FoundationPolicy,
    lam_model: LatentActionModel,
    world: WorldModel,
    horizon: int,
    seed: int = 0,
) -> np.ndarray:
    """Alternate snapped policy predictions with world-model steps."""
    frames = [initial_frame]
    for k in range(horizon):
        ctx = np.stack(frames[-foundation.cfg.context :])
        out = policy_forward(foundation, instruction, ctx, lam_model)
        rollout = apply_action_sequence(
            frames[-1], [out.snapped], world, lam_model, seed=seed * 1000 + k
        )
        frames.append(rollout[-1])
    return np.stack(frames)
