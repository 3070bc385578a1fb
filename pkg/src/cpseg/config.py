"""Training configuration, loadable from JSON or TOML."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from cpseg.exceptions import ConfigError
from cpseg.prompt_chain import PromptMode


@dataclass
class TrainConfig:
    tasks: int = 1
    epochs: int = 30
    lr: float = 1e-3
    lam: float = 0.1
    tau: float = 0.07
    batch_size: int = 8
    seed: int = 0
    prompt_mode: str = "cot"
    optimizer: str = "adam"
    samples_per_task: Optional[int] = None
    grad_clip: Optional[float] = None  # global gradient-norm cap, off by default
    lr_schedule: str = "constant"      # or "cosine": decays to zero over all steps
    # model
    dim: int = 32
    text_layers: int = 2
    vision_layers: int = 2
    heads: int = 2
    patch_size: int = 4
    max_len: int = 16
    text_pooling: str = "eos"
    thought_slots: str = "tokens"      # fusion attends over thought tokens, or "pooled" vectors
    class_context: float = 1.0         # init scale of learnable per-class bank offsets; 0 disables
    pool_size: int = 16
    pool_top_k: int = 4
    m_max: int = 8
    normalize: bool = True
    freeze_text_encoder: bool = False
    # losses
    ptm_reduction: str = "mean"
    ptm_prompts: str = "bank"
    decoder_loss: bool = True
    decoder_weight: float = 1.0

    def __post_init__(self):
        self.prompt_mode = PromptMode.parse(self.prompt_mode).value
        self.validate()

    def validate(self) -> "TrainConfig":
        checks = [
            (self.lr >= 0, f"lr must be >= 0, got {self.lr}"),
            (self.tau > 0, f"tau must be > 0, got {self.tau}"),
            (self.lam >= 0, f"lam must be >= 0, got {self.lam}"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.tasks >= 1, f"tasks must be >= 1, got {self.tasks}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.seed >= 0, f"seed must be >= 0, got {self.seed}"),
            (self.optimizer in ("adam", "sgd"), f"optimizer must be adam or sgd, got {self.optimizer!r}"),
            (self.dim % self.heads == 0, f"dim {self.dim} not divisible by heads {self.heads}"),
            (0 <= self.pool_top_k <= self.pool_size,
             f"pool_top_k {self.pool_top_k} outside [0, pool_size={self.pool_size}]"),
            (self.grad_clip is None or self.grad_clip > 0, f"grad_clip must be > 0, got {self.grad_clip}"),
            (self.lr_schedule in ("constant", "cosine"), f"bad lr_schedule {self.lr_schedule!r}"),
            (self.thought_slots in ("tokens", "pooled"), f"bad thought_slots {self.thought_slots!r}"),
            (self.class_context >= 0, f"class_context must be >= 0, got {self.class_context}"),
            (self.m_max >= 1, f"m_max must be >= 1, got {self.m_max}"),
            (self.ptm_reduction in ("mean", "sum"), f"bad ptm_reduction {self.ptm_reduction!r}"),
            (self.ptm_prompts in ("bank", "thoughts"), f"bad ptm_prompts {self.ptm_prompts!r}"),
            (self.decoder_weight >= 0, f"decoder_weight must be >= 0, got {self.decoder_weight}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def mode(self) -> PromptMode:
        return PromptMode(self.prompt_mode)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
