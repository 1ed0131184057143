"""Model and training configuration, JSON (de)serialization and config hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from pgseg.errors import ConfigurationError
from pgseg.losses import LossConfig
from pgseg.vocab import NUM_CLASSES

ABLATION_FLAGS = ("fgmpa", "mlff", "imo")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    enc_dim: int = 96
    enc_depth: int = 2
    enc_heads: int = 4
    lora_rank: int = 4
    d_text: int = 64
    dec_dim: int = 256  # C0; the 4:2:1 ledger puts the fusion width at C0 / 4
    dec_depth: int = 2
    dec_heads: int = 8
    num_classes: int = NUM_CLASSES
    refine_iterations: int = 3
    lambda_init: float = 0.1
    offset_clamp: float = 2.0
    fgmpa: bool = True
    mlff: bool = True
    imo: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be a multiple of patch_size")
        if self.dec_dim % 4:
            raise ConfigurationError(f"dec_dim {self.dec_dim} must be divisible by 4")
        if self.refine_iterations < 0:
            raise ConfigurationError("refine_iterations must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def fusion_dim(self) -> int:
        return self.dec_dim // 4

    @property
    def low_res(self) -> int:
        return self.grid * 4

    @property
    def high_res(self) -> int:
        return self.low_res * 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    max_steps: int | None = None
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.1
    warmup_steps: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: bool = False
    deterministic: bool = True
    eval_every: int = 1
    checkpoint_every: int = 25
    prompt_mode: str = "template"
    fraction: float = 1.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive and weight_decay non-negative")
        if not 0 < self.fraction <= 1:
            raise ConfigurationError("fraction must lie in (0, 1]")


# fields that may change between a run and its resumption
_RESUMABLE = {"epochs", "max_steps", "eval_every", "checkpoint_every"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        model = _build(ModelConfig, d.get("model", {}))
        t = dict(d.get("train", {}))
        if "loss" in t:
            t["loss"] = _build(LossConfig, t["loss"])
        if "betas" in t:
            t["betas"] = tuple(t["betas"])
        return cls(model=model, train=_build(TrainConfig, t))

    def config_hash(self) -> str:
        d = self.to_dict()
        for k in _RESUMABLE:
            d["train"].pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_ablation(self, disabled: list[str] | tuple[str, ...]) -> "RunConfig":
        for flag in disabled:
            if flag not in ABLATION_FLAGS:
                raise ConfigurationError(f"unknown ablation flag {flag!r}; choose from {ABLATION_FLAGS}")
        return replace(self, model=replace(self.model, **{f: False for f in disabled}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(kind, values: dict):
    known = {f.name for f in fields(kind)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**values)
