"""Run configuration: plain-text key=value files with section headers.

Every key is declared in the schema below with a type and a desk-scale
default; unknown sections or keys are rejected before any work starts, as are
type errors, with a field-level message. The full-scale hyperparameters from
the original experiments are shipped as a reference preset.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .lam import LamConfig, LamTrainConfig
from .nnkit import CodebookConfig
from .policy import PolicyConfig, PolicyTrainConfig
from .worldmodel import WorldModelConfig, WorldTrainConfig

RUN_DIR_ENV = "IGOR_RUN_DIR"  # overrides [run] run_dir when set


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    episode_length: int = 14
    train_episodes_per_embodiment: int = 400
    val_episodes_per_embodiment: int = 60
    finetune_episodes: int = 800
    frame_interval_s: float = 0.1
    jitter_fraction: float = 0.5
    jitter_magnitude: int = 2
    filter_keep_fraction: float = 0.6
    mixture_arm_a: float = 0.5
    mixture_arm_b: float = 0.5


@dataclass
class CodebookSection:
    num_tokens: int = 4
    codebook_size: int = 16
    code_dim: int = 32


@dataclass
class LamSection:
    patch: int = 4
    width: int = 48
    heads: int = 4
    idm_blocks: int = 2
    fdm_blocks: int = 2
    beta: float = 0.25
    context_limit: int = 8
    crop_min_frac: float = 0.75
    recon_crop_min_frac: float = 0.9
    gap: int = 3
    batch_size: int = 32
    steps: int = 5400
    learning_rate: float = 1e-3
    val_every: int = 900
    warmup_steps: int = 3000


@dataclass
class WorldSection:
    width: int = 48
    heads: int = 4
    blocks: int = 2
    euler_steps: int = 20
    batch_size: int = 16
    steps: int = 2600
    learning_rate: float = 3e-4


@dataclass
class PolicySection:
    width: int = 48
    heads: int = 4
    blocks: int = 2
    context: int = 2
    chunk_len: int = 3
    batch_size: int = 32
    steps: int = 1400
    learning_rate: float = 3e-4


@dataclass
class LowLevelSection:
    batch_size: int = 16
    steps: int = 400
    learning_rate: float = 1e-3
    fraction: float = 0.01
    seeds: int = 3
    horizon: int = 3


@dataclass
class EvalSection:
    predictiveness_m: int = 2000
    predictiveness_ns: str = "1,2,4,8,16,32"
    retrieval_k: int = 3
    retrieval_rows: int = 6
    migration_sources: int = 24
    migration_targets: int = 4
    controllability_actions: int = 6
    eval_episodes: int = 420
    ablation_steps: int = 1200
    rollout_horizon: int = 4

    def ns_list(self) -> list[int]:
        return [int(v) for v in self.predictiveness_ns.split(",") if v.strip()]


@dataclass
class ServiceSection:
    host: str = "127.0.0.1"
    port: int = 8321


@dataclass
class RunSection:
    run_dir: str = "runs/desk"
    seed: int = 0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    lam: LamSection = field(default_factory=LamSection)
    world: WorldSection = field(default_factory=WorldSection)
    policy: PolicySection = field(default_factory=PolicySection)
    lowlevel: LowLevelSection = field(default_factory=LowLevelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    service: ServiceSection = field(default_factory=ServiceSection)

    # ---- derived model/training configs ----

    def codebook_config(self) -> CodebookConfig:
        return CodebookConfig(
            num_tokens=self.codebook.num_tokens,
            codebook_size=self.codebook.codebook_size,
            code_dim=self.codebook.code_dim,
        )

    def lam_config(self) -> LamConfig:
        return LamConfig(
            codebook=self.codebook_config(),
            patch=self.lam.patch,
            width=self.lam.width,
            heads=self.lam.heads,
            idm_blocks=self.lam.idm_blocks,
            fdm_blocks=self.lam.fdm_blocks,
            beta=self.lam.beta,
            context_limit=self.lam.context_limit,
            crop_min_frac=self.lam.crop_min_frac,
            recon_crop_min_frac=self.lam.recon_crop_min_frac,
            gap=self.lam.gap,
            image_hw=(self.data.height, self.data.width),
            channels=self.data.channels,
        )

    def lam_train_config(self) -> LamTrainConfig:
        return LamTrainConfig(
            batch_size=self.lam.batch_size,
            steps=self.lam.steps,
            learning_rate=self.lam.learning_rate,
            seed=self.run.seed,
            val_every=self.lam.val_every,
            warmup_steps=self.lam.warmup_steps,
        )

    def world_config(self) -> WorldModelConfig:
        return WorldModelConfig(
            lam=self.lam_config(),
            width=self.world.width,
            heads=self.world.heads,
            blocks=self.world.blocks,
            euler_steps=self.world.euler_steps,
        )

    def world_train_config(self) -> WorldTrainConfig:
        return WorldTrainConfig(
            batch_size=self.world.batch_size,
            steps=self.world.steps,
            learning_rate=self.world.learning_rate,
            seed=self.run.seed,
        )

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            lam=self.lam_config(),
            width=self.policy.width,
            heads=self.policy.heads,
            blocks=self.policy.blocks,
            context=self.policy.context,
            chunk_len=self.policy.chunk_len,
        )

    def policy_train_config(self) -> PolicyTrainConfig:
        return PolicyTrainConfig(
            batch_size=self.policy.batch_size,
            steps=self.policy.steps,
            learning_rate=self.policy.learning_rate,
            seed=self.run.seed,
        )

    def lowlevel_train_config(self, seed: int | None = None) -> PolicyTrainConfig:
        return PolicyTrainConfig(
            batch_size=self.lowlevel.batch_size,
            steps=self.lowlevel.steps,
            learning_rate=self.lowlevel.learning_rate,
            seed=self.run.seed if seed is None else seed,
        )

    def run_dir(self) -> Path:
        override = getattr(self, "run_dir_override", None)
        if override:
            return Path(override)
        return Path(os.environ.get(RUN_DIR_ENV, self.run.run_dir))

    def resolved_text(self) -> str:
        lines = []
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            lines.append(f"[{section_field.name}]")
            for f in fields(section):
                lines.append(f"{f.name}={getattr(section, f.name)}")
            lines.append("")
        return "\n".join(lines)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse and validate a config file; None gives the desk defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section_name in parser.sections():
        if section_name not in sections:
            raise ConfigError(f"unknown config section [{section_name}]")
        section = sections[section_name]
        known = {f.name: f for f in fields(section)}
        for key, raw in parser.items(section_name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
            current = getattr(section, key)
            try:
                if isinstance(current, bool):
                    value = raw.strip().lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    value = int(raw)
                elif isinstance(current, float):
                    value = float(raw)
                else:
                    value = raw
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for [{section_name}] {key}: {raw!r} ({exc})"
                ) from exc
            setattr(section, key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    d = cfg.data
    checks = [
        (d.height > 0 and d.width > 0, "[data] height/width must be positive"),
        (d.height % cfg.lam.patch == 0 and d.width % cfg.lam.patch == 0,
         "[lam] patch must divide [data] height and width"),
        (d.frame_interval_s > 0, "[data] frame_interval_s must be > 0"),
        (0 <= d.jitter_fraction <= 1, "[data] jitter_fraction must be in [0, 1]"),
        (0 < d.filter_keep_fraction <= 1, "[data] filter_keep_fraction must be in (0, 1]"),
        (d.mixture_arm_a >= 0 and d.mixture_arm_b >= 0 and d.mixture_arm_a + d.mixture_arm_b > 0,
         "[data] mixture weights must be non-negative and not all zero"),
        (cfg.codebook.num_tokens >= 1, "[codebook] num_tokens must be >= 1"),
        (cfg.codebook.codebook_size >= 2, "[codebook] codebook_size must be >= 2"),
        (cfg.codebook.code_dim >= 1, "[codebook] code_dim must be >= 1"),
        (cfg.lam.gap >= 1, "[lam] gap must be >= 1"),
        (cfg.lam.steps >= 0 and cfg.world.steps >= 0 and cfg.policy.steps >= 0,
         "training steps must be >= 0"),
        (0 < cfg.lowlevel.fraction <= 1, "[lowlevel] fraction must be in (0, 1]"),
        (cfg.eval.retrieval_k >= 1, "[eval] retrieval_k must be >= 1"),
        (cfg.world.euler_steps >= 1, "[world] euler_steps must be >= 1"),
        (0.5 <= cfg.lam.crop_min_frac <= 1.0, "[lam] crop_min_frac must be in [0.5, 1]"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


# reference hyperparameters of the original full-scale experiments; recorded
# for documentation, not runnable at desk scale
FULL_SCALE_PRESET = {
    "data": {"height": 224, "width": 224},
    "codebook": {"num_tokens": 4, "codebook_size": 32, "code_dim": 128},
    "lam": {"patch": 14, "batch_size": 512, "steps": 140_000, "learning_rate": 1.5e-4},
    "world": {"batch_size": 12, "steps": 48_000, "learning_rate": 1e-4},
    "policy": {
        "width": 768, "heads": 12, "blocks": 12,
        "batch_size": 128, "steps": 124_000, "learning_rate": 1e-4,
    },
    "lowlevel": {"batch_size": 128, "steps": 32_000, "learning_rate": 1e-4, "chunk_len": 3},
}
