"""Configuration dataclasses and named hyperparameter profiles."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    dim: int = 128
    visual_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    cross_heads: int = 8
    mlp_ratio: int = 2
    max_len: int = 16
    init_std: float = 0.02
    # 2.659 is read as log-temperature by default ("log"); "raw" uses it as tau.
    tau_init: float = 2.659
    tau_init_mode: str = "log"
    # logits are tau*k - b, so +10 starts every pair at tau*k - 10
    bias_init: float = 10.0

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.dim % self.heads or self.dim % self.cross_heads:
            raise ConfigError("dim must be divisible by heads and cross_heads")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.tau_init_mode not in ("log", "raw"):
            raise ConfigError("tau_init_mode must be 'log' or 'raw'")


@dataclass
class LossWeights:
    lambda_ila: float = 1.0
    lambda_iis: float = 1.0
    lambda_mps: float = 0.01
    lambda_kta: float = 1.0
    w_uwp: float = 1.5
    p_mask: float = 0.1
    key_frac: float = 0.05
    shared_mask: bool = False

    def validate(self) -> None:
        for name in ("lambda_ila", "lambda_iis", "lambda_mps", "lambda_kta", "w_uwp", "p_mask", "key_frac"):
            value = getattr(self, name)
            if not (value == value) or value in (float("inf"), float("-inf")) or value < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {value}")
        if self.lambda_ila + self.lambda_iis + self.lambda_mps + self.lambda_kta == 0:
            raise ConfigError("at least one loss component needs a nonzero weight")
        if self.w_uwp < 1:
            raise ConfigError("w_uwp must be >= 1")
        if not 0 <= self.p_mask < 1:
            raise ConfigError("p_mask must be in [0, 1)")
        if not 0 < self.key_frac <= 1:
            raise ConfigError("key_frac must be in (0, 1]")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    epochs: int = 30
    warmup_steps: int = 100
    batch_size: int = 16
    seed: int = 0
    max_items: int = 7
    grad_clip: float = 1.0
    diverse_sampling: bool = False
    ds_max_merge: int = 3
    ds_flag_p: float = 0.5
    checkpoint_every: int = 0
    eval_frac: float = 0.1
    profile: str = "desk"
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_items < 1:
            raise ConfigError("max_items must be >= 1")
        if not 0 <= self.eval_frac < 1:
            raise ConfigError("eval_frac must be in [0, 1)")
        self.loss.validate()
        self.model.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Named hyperparameter sets. "desk" is the only one sized for CPU runs; the
# others record full-scale per-domain settings and are not meant to run here.
PROFILES: dict[str, dict] = {
    "desk": {},
    "brain-mri": {
        "lr": 1.75e-4, "weight_decay": 0.2, "batch_size": 256, "epochs": 24,
        "warmup_steps": 2000, "max_items": 7,
        "loss": {"lambda_iis": 1.0, "lambda_mps": 0.01, "lambda_kta": 1.0, "key_frac": 0.05,
                 "p_mask": 0.1, "w_uwp": 1.5},
    },
    "brain-ct": {
        "lr": 1.75e-4, "weight_decay": 0.5, "batch_size": 256, "epochs": 21,
        "warmup_steps": 2000, "max_items": 7,
        "loss": {"lambda_iis": 1.0, "lambda_mps": 0.1, "lambda_kta": 1.0, "key_frac": 0.05,
                 "p_mask": 0.1, "w_uwp": 1.5},
    },
    "chest-ct": {
        "lr": 1e-4, "weight_decay": 0.5, "batch_size": 512, "epochs": 80,
        "warmup_steps": 100, "max_items": 10,
        "loss": {"lambda_iis": 1.0, "lambda_mps": 0.1, "lambda_kta": 1.0, "key_frac": 0.05,
                 "p_mask": 0.05, "w_uwp": 1.5},
    },
    "remote-sensing": {
        "lr": 3e-4, "weight_decay": 1.5, "batch_size": 1024, "epochs": 120,
        "warmup_steps": 100, "max_items": 6, "diverse_sampling": True,
        "ds_max_merge": 3, "ds_flag_p": 0.5,
        "loss": {"lambda_iis": 1.0, "lambda_mps": 2.0, "lambda_kta": 1.5, "key_frac": 0.2,
                 "p_mask": 0.4, "w_uwp": 1.5},
    },
    "natural": {
        "lr": 5e-4, "weight_decay": 0.8, "batch_size": 1024, "epochs": 60,
        "warmup_steps": 2000, "max_items": 7, "diverse_sampling": True,
        "ds_max_merge": 3, "ds_flag_p": 0.5,
        "loss": {"lambda_iis": 0.1, "lambda_mps": 0.1, "lambda_kta": 0.2, "key_frac": 0.2,
                 "p_mask": 0.1, "w_uwp": 2.0},
    },
}


def _apply(obj, overrides: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {where}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a mapping")
            _apply(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)


def build_config(overrides: dict | None = None) -> TrainConfig:
    """Resolve profile defaults plus overrides into a validated TrainConfig.

    Unknown keys raise ConfigError naming the key.
    """
    overrides = dict(overrides or {})
    profile = overrides.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile: {profile}")
    cfg = TrainConfig()
    _apply(cfg, PROFILES[profile], "")
    _apply(cfg, overrides, "")
    cfg.validate()
    return cfg


def config_from_dict(d: dict) -> TrainConfig:
    cfg = TrainConfig()
    _apply(cfg, d, "")
    cfg.validate()
    return cfg


def read_overrides(path) -> dict:
    """Parse a JSON config file into a (possibly partial) override mapping."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def load_config(path) -> TrainConfig:
    return build_config(read_overrides(path))
