"""Run configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError

MOE_KINDS = ("omni", "dense", "sparse", "mlp")

# Fields that determine parameter shapes; a checkpoint only loads into a
# model whose values for these keys agree.
ARCHITECTURE_KEYS = (
    "n_subjects",
    "d_max",
    "n_patches",
    "width",
    "n_blocks",
    "n_moe_blocks",
    "n_experts",
    "hidden_mult",
    "image_tokens",
    "text_tokens",
    "moe_kind",
    "moe_placement",
    "shared_alpha",
)


@dataclass
class RunConfig:
    # synthetic world
    seed: int = 0
    n_subjects: int = 4
    n_stimuli: int = 600
    latent_dim: int = 16
    voxel_min: int = 200
    voxel_max: int = 256
    noise_min: float = 4.0
    noise_max: float = 8.0
    n_clusters: int = 30
    cluster_spread: float = 0.5
    nonlinear_mixing: bool = False
    train_fraction: float = 0.9
    train_trials: int = 3
    test_trials: int = 1

    # encoder
    d_max: int = 256
    n_patches: int = 16
    width: int = 32
    n_blocks: int = 6
    n_moe_blocks: int = 2
    n_experts: int = 8
    hidden_mult: int = 4
    image_tokens: int = 4
    text_tokens: int = 4
    moe_kind: str = "omni"
    moe_placement: str = "replace"
    shared_alpha: bool = False
    sparse_k: int = 1
    init_std: float = 0.02

    # optimisation
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.9999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    temperature: float = 0.07
    calibrate_scale: bool = True

    # inference / evaluation
    mix_weight: float = 0.5
    ecphory_k: int = 1
    similarity_token: int = 0
    two_way_trials: int = 50
    retrieval_k: int = 5

    # experiments
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])
    ablation_epochs: int = 10
    sweep_experts: list = field(default_factory=lambda: [2, 4, 8])
    sweep_epochs: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.n_stimuli < 2:
            raise ConfigError("n_stimuli must be >= 2")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not 1 <= self.voxel_min <= self.voxel_max <= self.d_max:
            raise ConfigError("need 1 <= voxel_min <= voxel_max <= d_max")
        if self.voxel_max - self.voxel_min + 1 < self.n_subjects:
            raise ConfigError("voxel range too narrow for distinct per-subject voxel counts")
        if not 0.0 <= self.noise_min <= self.noise_max:
            raise ConfigError("need 0 <= noise_min <= noise_max")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.d_max % self.n_patches:
            raise ConfigError(f"d_max={self.d_max} is not divisible by n_patches={self.n_patches}")
        if not 0 <= self.n_moe_blocks <= self.n_blocks:
            raise ConfigError("need 0 <= n_moe_blocks <= n_blocks")
        if self.moe_kind not in MOE_KINDS:
            raise ConfigError(f"moe_kind must be one of {MOE_KINDS}, got {self.moe_kind!r}")
        if self.moe_placement not in ("replace", "alongside"):
            raise ConfigError("moe_placement must be 'replace' or 'alongside'")
        if not 1 <= self.sparse_k <= self.n_experts:
            raise ConfigError("need 1 <= sparse_k <= n_experts")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.mix_weight <= 1.0:
            raise ConfigError("mix_weight must lie in [0, 1]")
        if self.ecphory_k < 1:
            raise ConfigError("ecphory_k must be >= 1")
        if self.batch_size < 1 or min(self.epochs, self.ablation_epochs, self.sweep_epochs) < 0:
            raise ConfigError("batch_size must be >= 1 and epoch budgets >= 0")
        for name in ("width", "n_blocks", "n_experts", "hidden_mult", "image_tokens", "text_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def subjects(self) -> list[int]:
        return list(range(1, self.n_subjects + 1))

    @property
    def hidden(self) -> int:
        return self.hidden_mult * self.width

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in ARCHITECTURE_KEYS}

    # -- text format ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(hints[key], value, key)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse(kind, value: str, key: str):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is list:
            return [int(v) for v in value.split(",") if v.strip()]
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(kind, '__name__', kind)}") from None
