"""Latent action model: inverse dynamics -> quantized action -> forward dynamics.

The inverse dynamics encoder sees a short frame window under one random crop
and compresses each transition into N quantized tokens. The forward dynamics
decoder sees only a single (differently cropped) frame plus the quantized
action and must repaint the goal frame, which starves it of any shortcut
around the action bottleneck. Both train jointly on reconstruction plus the
quantizer's commitment terms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import datafmt, worldgen
from .errors import TrainingDiverged
from .nnkit import (
    CodebookConfig,
    PatchDecode,
    PatchEmbed,
    ReadoutTokens,
    SpatioTemporalBlock,
    VectorQuantizer,
    seed_all,
)
from .worldgen import VideoClip


class CropTarget(str, Enum):
    C1_INPUT = "C1_INPUT"
    C2_RECON = "C2_RECON"


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    height: int
    width: int
    target: CropTarget

    def validate(self, frame_hw: tuple[int, int], min_frac: float = 0.75) -> None:
        h, w = frame_hw
        if not (0 <= self.top and self.top + self.height <= h):
            raise ValueError("crop exceeds frame vertically")
        if not (0 <= self.left and self.left + self.width <= w):
            raise ValueError("crop exceeds frame horizontally")
        if self.height < min_frac * h or self.width < min_frac * w:
            raise ValueError("crop side below the minimum fraction")


def identity_crop(frame_hw: tuple[int, int], target: CropTarget) -> CropSpec:
    return CropSpec(0, 0, frame_hw[0], frame_hw[1], target)


def random_crop_spec(
    rng: np.random.Generator,
    frame_hw: tuple[int, int],
    target: CropTarget,
    min_frac: float = 0.75,
) -> CropSpec:
    h, w = frame_hw
    ch = int(rng.integers(int(np.ceil(min_frac * h)), h + 1))
    cw = int(rng.integers(int(np.ceil(min_frac * w)), w + 1))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return CropSpec(top, left, ch, cw, target)


def apply_crop(frames: torch.Tensor, spec: CropSpec) -> torch.Tensor:
    """Crop (..., H, W, C) frames and resize back to the full resolution."""
    lead = frames.shape[:-3]
    h, w, c = frames.shape[-3:]
    x = frames.reshape(-1, h, w, c)
    x = x[:, spec.top : spec.top + spec.height, spec.left : spec.left + spec.width, :]
    if spec.height != h or spec.width != w:
        x = x.permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        x = x.permute(0, 2, 3, 1)
    return x.reshape(*lead, h, w, c)


@dataclass(frozen=True)
class LatentAction:
    """Quantized action: N code indices plus the selected code rows."""

    indices: tuple[int, ...]
    embedding: np.ndarray  # (N, D) float32, exact codebook rows
    source: tuple[str, int, int] = ("", -1, -1)  # (clip_id, t, gap)


@dataclass
class LabeledPair:
    obs: np.ndarray
    goal: np.ndarray
    context: np.ndarray  # (k, H, W, C) frames at the pair's stride, ending at obs
    action: LatentAction
    instruction: list[int]
    gt_kind: worldgen.ActionKind | None
    gt_continuous: np.ndarray | None  # (dx, dy, grab)


@dataclass(frozen=True)
class LamConfig:
    codebook: CodebookConfig = CodebookConfig()
    patch: int = 4
    width: int = 48
    heads: int = 4
    idm_blocks: int = 2
    fdm_blocks: int = 2
    beta: float = 0.25
    context_limit: int = 8
    crop_min_frac: float = 0.75       # encoder input view (c1)
    recon_crop_min_frac: float = 0.9  # reconstruction view (c2)
    gap: int = 3
    image_hw: tuple[int, int] = (worldgen.H, worldgen.W)
    channels: int = worldgen.C


class InverseDynamics(nn.Module):
    """Window of frames -> per-step pre-quantization action embeddings."""

    def __init__(self, cfg: LamConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch, cfg.channels, cfg.width, cfg.image_hw)
        self.readout = ReadoutTokens(cfg.codebook.num_tokens, cfg.width)
        self.blocks = nn.ModuleList(
            SpatioTemporalBlock(cfg.width, cfg.heads) for _ in range(cfg.idm_blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.width)
        self.to_code = nn.Linear(cfg.width, cfg.codebook.code_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, C) -> (B, T, N, D) per-step embeddings (step t explains
        the transition from frame t-1 to frame t).

        Rows are L2-normalized to a fixed radius so the commitment term cannot
        shrink the embedding scale toward a degenerate codebook."""
        grid = self.readout.append(self.embed(frames))
        for block in self.blocks:
            grid = block(grid)
        summary = self.readout.take(grid)
        z = self.to_code(self.out_norm(summary))
        d = z.shape[-1]
        return F.normalize(z, dim=-1) * (d**0.5)


class ForwardDynamics(nn.Module):
    """Single frame + quantized action -> goal frame in [0, 1]."""

    def __init__(self, cfg: LamConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.codebook.num_tokens
        self.embed = PatchEmbed(cfg.patch, cfg.channels, cfg.width, cfg.image_hw)
        self.action_in = nn.Linear(cfg.codebook.code_dim, cfg.width)
        self.action_pos = nn.Parameter(torch.zeros(n, cfg.width))
        nn.init.trunc_normal_(self.action_pos, std=0.02)
        self.blocks = nn.ModuleList(
            SpatioTemporalBlock(cfg.width, cfg.heads) for _ in range(cfg.fdm_blocks)
        )
        self.out_norm = nn.LayerNorm(cfg.width)
        self.decode = PatchDecode(cfg.patch, cfg.channels, cfg.width, cfg.image_hw)

    def forward(self, obs: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) obs + (B, N, D) action -> (B, H, W, C) prediction."""
        tokens = self.embed(obs.unsqueeze(1))  # (B, 1, L, E)
        act = self.action_in(action) + self.action_pos  # (B, N, E)
        grid = torch.cat([tokens, act.unsqueeze(1)], dim=2)
        for block in self.blocks:
            grid = block(grid)
        patch_tokens = self.out_norm(grid[:, :, : self.embed.num_tokens, :])
        return self.decode(patch_tokens).squeeze(1)


class LatentActionModel(nn.Module):
    def __init__(self, cfg: LamConfig):
        super().__init__()
        self.cfg = cfg
        self.idm = InverseDynamics(cfg)
        self.vq = VectorQuantizer(cfg.codebook, beta=cfg.beta)
        self.fdm = ForwardDynamics(cfg)

    # ---- inference ----

    def idm_forward(self, frames: torch.Tensor, crop: CropSpec | None = None) -> LatentAction:
        """Quantized action for the final transition of one frame window."""
        if frames.ndim != 4 or frames.shape[0] < 2:
            raise ValueError("need a window of at least 2 frames")
        if frames.shape[0] > self.cfg.context_limit:
            raise ValueError(f"window exceeds context limit {self.cfg.context_limit}")
        if crop is not None:
            frames = apply_crop(frames, crop)
        with torch.no_grad():
            z = self.idm(frames.unsqueeze(0))
            indices = self.vq.nearest_indices(z[0, -1])
            embedding = self.vq.lookup(indices)
        return LatentAction(
            indices=tuple(int(i) for i in indices),
            embedding=embedding.numpy().astype(np.float32),
        )

    def label_windows(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, C) uncropped windows -> (B, N) final-step indices."""
        with torch.no_grad():
            z = self.idm(windows)
            return self.vq.nearest_indices(z[:, -1])

    def fdm_forward(
        self, obs: torch.Tensor, action: LatentAction | torch.Tensor, crop: CropSpec | None = None
    ) -> torch.Tensor:
        """(H, W, C) obs + action -> (H, W, C) predicted goal."""
        if isinstance(action, LatentAction):
            action = torch.from_numpy(action.embedding)
        if crop is not None:
            obs = apply_crop(obs, crop)
        with torch.no_grad():
            return self.fdm(obs.unsqueeze(0), action.unsqueeze(0))[0]

    # ---- training ----

    def loss(
        self,
        windows: torch.Tensor,
        c1: Sequence[CropSpec] | None,
        c2: Sequence[CropSpec] | None,
        quantize: bool = True,
        bottleneck_noise: float = 0.0,
        noise_generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(total, recon, commit) on a batch of (B, T, H, W, C) windows.

        With quantize=False the bottleneck passes encoder outputs straight
        through (continuous-bottleneck mode) and the commitment term is zero;
        `bottleneck_noise` then perturbs the passed-through embedding so only
        noise-robust information survives the warmup phase.
        """
        if windows.shape[0] == 0:
            raise ValueError("empty batch")
        if c1 is not None:
            inp = torch.stack([apply_crop(w, s) for w, s in zip(windows, c1)])
        else:
            inp = windows
        if c2 is not None:
            recon_view = torch.stack([apply_crop(w, s) for w, s in zip(windows, c2)])
        else:
            recon_view = windows
        z = self.idm(inp)[:, -1]  # (B, N, D)
        if quantize:
            _, quantized, commit = self.vq(z)
        else:
            quantized, commit = z, torch.zeros((), dtype=z.dtype)
            if bottleneck_noise > 0:
                noise = torch.randn(z.shape, generator=noise_generator)
                quantized = quantized + bottleneck_noise * noise
        pred = self.fdm(recon_view[:, -2], quantized)
        recon = F.mse_loss(pred, recon_view[:, -1])
        total = recon + commit
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss (recon={float(recon.detach())}, "
                f"commit={float(commit.detach())})"
            )
        return total, recon, commit


# --------------------------------------------------------------------------
# window sampling shared by the trainers


@dataclass
class PairWindows:
    """All (clip, t, t+gap) windows of a clip list, with tensor extraction."""

    clips: Sequence[VideoClip]
    gap: int
    entries: list[tuple[int, int]] = field(default_factory=list)  # (clip_idx, t)

    def __post_init__(self):
        for ci, clip in enumerate(self.clips):
            for t, _ in worldgen.sample_pairs(clip, (self.gap, self.gap)):
                self.entries.append((ci, t))

    def __len__(self) -> int:
        return len(self.entries)

    def window(self, i: int) -> np.ndarray:
        ci, t = self.entries[i]
        frames = self.clips[ci].frames
        return np.stack([frames[t], frames[t + self.gap]])

    def batch(self, idx: Sequence[int]) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.window(i) for i in idx]))

    def kind(self, i: int) -> worldgen.ActionKind:
        ci, t = self.entries[i]
        return worldgen.window_kind(self.clips[ci], t, self.gap)

    def continuous(self, i: int) -> np.ndarray:
        ci, t = self.entries[i]
        return worldgen.window_continuous_action(self.clips[ci], t, self.gap)


@dataclass
class TrainCurve:
    steps: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    commit: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def to_rows(self) -> list[dict[str, float]]:
        return [
            {"step": s, "total": t, "recon": r, "commit": c}
            for s, t, r, c in zip(self.steps, self.total, self.recon, self.commit)
        ]


@dataclass(frozen=True)
class LamTrainConfig:
    batch_size: int = 32
    steps: int = 5400
    learning_rate: float = 1e-3
    seed: int = 0
    val_every: int = 800
    restart_every: int = 200
    warmup_steps: int = 3000  # continuous bottleneck before quantization kicks in
    warmup_noise: float = 0.5  # noise on the warmup bottleneck; keeps it coarse
    recluster_every: int = 400  # k-means re-init cadence right after warmup
    recluster_until: int = 4400
    divergence_factor: float = 10.0
    divergence_patience: int = 500


# full-scale reference hyperparameters, recorded for context
FULL_SCALE_LAM_TRAIN = {"batch_size": 512, "steps": 140_000, "learning_rate": 1.5e-4, "patch": 14}


def validation_loss(
    model: LatentActionModel, clips: Sequence[VideoClip], gap: int, quantize: bool = True
) -> float:
    """Mean reconstruction loss over all windows with crops disabled (full frames)."""
    windows = PairWindows(clips, gap)
    was_training = model.training
    model.eval()
    losses = []
    with torch.no_grad():
        for start in range(0, len(windows), 64):
            idx = range(start, min(start + 64, len(windows)))
            batch = windows.batch(list(idx))
            z = model.idm(batch)[:, -1]
            if quantize:
                z = model.vq.lookup(model.vq.nearest_indices(z))
            pred = model.fdm(batch[:, -2], z)
            losses.append(float(F.mse_loss(pred, batch[:, -1])) * len(idx))
    if was_training:
        model.train()
    return sum(losses) / len(windows)


def train_lam(
    train_clips: Sequence[VideoClip],
    val_clips: Sequence[VideoClip],
    cfg: LamConfig,
    train_cfg: LamTrainConfig,
    log_every: int = 200,
    log=print,
) -> tuple[LatentActionModel, TrainCurve]:
    """Train the latent action model; deterministic given the seed."""
    gen = seed_all(train_cfg.seed)
    model = LatentActionModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(train_cfg.steps, 1))
    rng = np.random.default_rng(train_cfg.seed)
    windows = PairWindows(train_clips, cfg.gap)
    if len(windows) == 0:
        raise ValueError("no training windows")
    warmup = min(train_cfg.warmup_steps, train_cfg.steps // 2)
    curve = TrainCurve()
    initial_loss = None
    bad_steps = 0
    hw = cfg.image_hw
    t_start = time.time()
    for step in range(train_cfg.steps):
        quantize = step >= warmup
        recluster_due = (
            quantize
            and step < train_cfg.recluster_until
            and (step - warmup) % max(train_cfg.recluster_every, 1) == 0
        )
        if recluster_due and warmup > 0:
            # (re-)seed the codebook from the current encoder output
            # distribution; codes keep tracking the geometry while it moves
            with torch.no_grad():
                idx = rng.integers(0, len(windows), size=8 * train_cfg.batch_size)
                z_init = model.idm(windows.batch(idx.tolist()))[:, -1]
            model.vq.init_codes_from(z_init, gen)
        idx = rng.integers(0, len(windows), size=train_cfg.batch_size)
        batch = windows.batch(idx.tolist())
        c1 = [
            random_crop_spec(rng, hw, CropTarget.C1_INPUT, cfg.crop_min_frac)
            for _ in range(len(idx))
        ]
        c2 = [
            random_crop_spec(rng, hw, CropTarget.C2_RECON, cfg.recon_crop_min_frac)
            for _ in range(len(idx))
        ]
        total, recon, commit = model.loss(
            batch,
            c1,
            c2,
            quantize=quantize,
            bottleneck_noise=train_cfg.warmup_noise,
            noise_generator=gen,
        )
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()

        loss_val = float(total.detach())
        curve.steps.append(step)
        curve.total.append(loss_val)
        curve.recon.append(float(recon.detach()))
        curve.commit.append(float(commit.detach()))
        if initial_loss is None:
            initial_loss = loss_val
        if loss_val > train_cfg.divergence_factor * initial_loss:
            bad_steps += 1
            if bad_steps >= train_cfg.divergence_patience:
                raise TrainingDiverged(
                    f"loss {loss_val:.4f} stayed above {train_cfg.divergence_factor}x "
                    f"initial {initial_loss:.4f} for {bad_steps} steps"
                )
        else:
            bad_steps = 0

        if quantize and train_cfg.restart_every and (step + 1) % train_cfg.restart_every == 0:
            with torch.no_grad():
                z = model.idm(batch)[:, -1]
            model.vq.restart_dead_codes(z, gen)
        if (step + 1) % train_cfg.val_every == 0 or step + 1 == train_cfg.steps:
            vl = validation_loss(model, val_clips, cfg.gap, quantize=quantize)
            curve.val_steps.append(step)
            curve.val_loss.append(vl)
            if log_every:
                log(
                    f"step {step + 1}/{train_cfg.steps} loss {loss_val:.4f} "
                    f"val {vl:.4f} ({time.time() - t_start:.0f}s)"
                )
        elif log_every and (step + 1) % log_every == 0:
            log(f"step {step + 1}/{train_cfg.steps} loss {loss_val:.4f}")
    model.eval()
    return model, curve


# --------------------------------------------------------------------------
# labeling


def label_dataset(
    clips: Sequence[VideoClip],
    model: LatentActionModel,
    gap: int | None = None,
    batch_size: int = 128,
) -> dict[str, list[datafmt.PairLabel]]:
    """Quantized action indices for every (t, t+gap) pair, crops disabled."""
    gap = gap if gap is not None else model.cfg.gap
    windows = PairWindows(clips, gap)
    labels: dict[str, list[datafmt.PairLabel]] = {c.clip_id: [] for c in clips}
    model.eval()
    for start in range(0, len(windows), batch_size):
        idx = list(range(start, min(start + batch_size, len(windows))))
        batch = windows.batch(idx)
        indices = model.label_windows(batch)
        for row, i in enumerate(idx):
            ci, t = windows.entries[i]
            labels[clips[ci].clip_id].append(
                datafmt.PairLabel(t=t, gap=gap, indices=tuple(int(v) for v in indices[row]))
            )
    return labels


def iter_labeled_pairs(
    clips: Sequence[VideoClip],
    labels: dict[str, list[datafmt.PairLabel]],
    model: LatentActionModel,
    context: int = 2,
) -> Iterator[LabeledPair]:
    """Materialize LabeledPair records; embeddings come from the codebook rows."""
    for clip in clips:
        for pair in labels.get(clip.clip_id, []):
            t, gap = pair.t, pair.gap
            emb = model.vq.lookup(torch.tensor(pair.indices)).numpy().astype(np.float32)
            ctx_idx = [max(t - k * gap, 0) for k in reversed(range(context))]
            yield LabeledPair(
                obs=clip.frames[t],
                goal=clip.frames[t + gap],
                context=clip.frames[ctx_idx],
                action=LatentAction(pair.indices, emb, (clip.clip_id, t, gap)),
                instruction=list(clip.instruction),
                gt_kind=worldgen.window_kind(clip, t, gap) if clip.gt_actions else None,
                gt_continuous=(
                    worldgen.window_continuous_action(clip, t, gap) if clip.gt_actions else None
                ),
            )
