"""Configuration management for jala-desk."""

import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from jala.errors import ConfigError

# Default output location
JALA_OUT = Path(os.environ.get("JALA_OUT", "./runs")).expanduser()
BUNDLED_CONFIGS = Path(__file__).parent / "configs"

# Mask ratio grid for the target chunk: the 0.1-step grid from 0.05 plus the full mask.
TARGET_MASK_RATIOS = (0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.0)
SUFFIX_MASK_RATE = 0.05


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class RuntimeConfig(_Section):
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)


class WorldConfig(_Section):
    finger_dims: int = Field(5, ge=1)
    episode_length: int = Field(60, ge=2)
    move_frames: int = Field(40, ge=1)
    n_targets: int = Field(4, ge=1)
    n_verbs: int = Field(3, ge=1)
    obs_tokens: int = Field(4, ge=1)
    obs_token_dim: int = Field(8, ge=1)
    nuisance_dim: int = Field(8, ge=1)
    nonlinear_scale: float = Field(0.1, ge=0)
    lab_nuisance_std: float = Field(0.05, ge=0)
    wild_nuisance_factor: float = Field(4.0, gt=0)
    wild_time_scale: float = Field(0.5, gt=0)
    pseudo_label_fraction: float = Field(0.10, ge=0, le=1)
    pseudo_label_noise: float = Field(0.01, ge=0)
    proprio_dim: int = Field(4, ge=1)
    action_dim: int = Field(4, ge=1)
    action_horizon: int = Field(8, ge=1)
    lab_train: int = Field(512, ge=1)
    lab_eval: int = Field(64, ge=1)
    wild_train: int = Field(256, ge=1)
    wild_eval: int = Field(64, ge=1)
    robot_train: int = Field(256, ge=1)
    robot_eval: int = Field(64, ge=1)
    seed: int = Field(1234, ge=0)
    split_seed_starts: Optional[Dict[str, int]] = None

    @property
    def obs_dim(self) -> int:
        return self.obs_tokens * self.obs_token_dim

    @property
    def state_embed_dim(self) -> int:
        return self.obs_dim - self.nuisance_dim

    @property
    def pose_dim(self) -> int:
        return 6 + self.finger_dims

    @model_validator(mode="after")
    def _check_dims(self):
        if self.nuisance_dim >= self.obs_dim:
            raise ValueError("nuisance_dim must leave room for the state embedding")
        if self.state_embed_dim < self.pose_dim:
            raise ValueError("state embedding must be at least as wide as the pose")
        return self


class TokenizerConfig(_Section):
    chunk_length: int = Field(15, ge=1)
    codebook_size: int = Field(64, ge=2)
    groups: int = Field(2, ge=1)
    levels: int = Field(2, ge=1)
    slots_wrist: int = Field(2, ge=1)
    slots_finger: int = Field(2, ge=1)
    code_dim: int = Field(8, ge=1)
    hidden: int = Field(32, ge=1)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    commitment: float = Field(0.25, ge=0)
    ema_decay: float = Field(0.99, ge=0, lt=1)
    dead_code_epochs: int = Field(2, ge=1)
    min_chunks: int = Field(1000, ge=1)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    mpjpe_threshold: float = Field(0.05, gt=0)

    @property
    def tokens_wrist(self) -> int:
        return self.slots_wrist * self.groups * self.levels

    @property
    def tokens_finger(self) -> int:
        return self.slots_finger * self.groups * self.levels

    @property
    def tokens_per_chunk(self) -> int:
        return self.tokens_wrist + self.tokens_finger

    @model_validator(mode="after")
    def _check_groups(self):
        if self.code_dim % self.groups:
            raise ValueError("code_dim must be divisible by groups")
        return self


class BackboneConfig(_Section):
    layers: int = Field(6, ge=1)
    align_layer: Optional[int] = None
    d_model: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    max_positions: int = Field(256, ge=1)

    @property
    def resolved_align_layer(self) -> int:
        if self.align_layer is not None:
            return self.align_layer
        # 19 of 28 layers in the full-size model
        return max(1, round(19 / 28 * self.layers))

    @model_validator(mode="after")
    def _check_layers(self):
        if self.align_layer is not None and not 1 <= self.align_layer <= self.layers:
            raise ValueError("align_layer must lie in [1, layers]")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        return self


class PerceiverConfig(_Section):
    layers: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    head_hidden: int = Field(128, ge=1)
    alpha: float = Field(0.999, ge=0, lt=1)
    ema: bool = True
    decoupled: bool = True


class FlowConfig(_Section):
    steps: int = Field(4, ge=1)
    depth: int = Field(4, ge=1)
    width: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    target: Literal["noise", "velocity"] = "noise"


class TrainConfig(_Section):
    base_lr: float = Field(3e-5, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    betas: Tuple[float, float] = (0.9, 0.95)
    warmup_fraction: float = Field(0.05, gt=0, lt=1)
    clip_norm: float = Field(1.0, gt=0)
    align_weight: float = Field(0.5, ge=0)
    batch_size: int = Field(16, ge=1)
    total_steps: int = Field(2000, ge=1)
    labeled_ratio: float = Field(2.0, gt=0)
    wild_fraction: float = Field(1.0, ge=0, le=1)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(500, ge=1)

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, v):
        if not all(0 <= b < 1 for b in v):
            raise ValueError("betas must lie in [0, 1)")
        return v


class PostTrainConfig(_Section):
    base_lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    betas: Tuple[float, float] = (0.9, 0.95)
    warmup_fraction: float = Field(0.05, gt=0, lt=1)
    clip_norm: float = Field(1.0, gt=0)
    batch_size: int = Field(16, ge=1)
    total_steps: int = Field(1000, ge=1)
    init: Literal["pretrained", "random"] = "pretrained"
    flow_layer: Optional[int] = Field(None, ge=1)  # backbone block feeding the flow head; default align layer
    log_every: int = Field(10, ge=1)


class EvalConfig(_Section):
    step_fraction: float = Field(0.05, gt=0, le=1)
    runs: int = Field(5, ge=1)
    confidence_noise: float = Field(1.0, ge=0)
    chunk_index: int = Field(0, ge=0)
    mde_mode: Literal["distance", "angle"] = "distance"
    pa_scale: bool = True
    max_episodes: Optional[int] = None
    sweep_fractions: List[float] = [0.0, 0.25, 0.5, 1.0]
    sweep_seeds: int = Field(3, ge=1)


class LoggingConfig(_Section):
    wall_time: bool = False


class JalaConfig(_Section):
    runtime: RuntimeConfig = RuntimeConfig()
    world: WorldConfig = WorldConfig()
    tokenizer: TokenizerConfig = TokenizerConfig()
    backbone: BackboneConfig = BackboneConfig()
    perceiver: PerceiverConfig = PerceiverConfig()
    flow: FlowConfig = FlowConfig()
    pretrain: TrainConfig = TrainConfig()
    posttrain: PostTrainConfig = PostTrainConfig()
    eval: EvalConfig = EvalConfig()
    logging: LoggingConfig = LoggingConfig()

    @model_validator(mode="after")
    def _check_flow_layer(self):
        layer = self.posttrain.flow_layer
        if layer is not None and layer > self.backbone.layers:
            raise ValueError(f"posttrain.flow_layer {layer} exceeds backbone.layers {self.backbone.layers}")
        return self

    @property
    def flow_layer(self) -> int:
        return self.posttrain.flow_layer or self.backbone.resolved_align_layer


DEFAULT_CONFIG = JalaConfig().model_dump(mode="json")


def load_config(path=None, overrides=None) -> JalaConfig:
    """Load a JSON/YAML config file over the defaults and apply dotted overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            try:
                raw = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"unreadable config {path}: {e}".replace("\n", " ")) from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
    merged = _deep_merge(DEFAULT_CONFIG, raw)
    for item in overrides or []:
        key, value = parse_override(item)
        merged = _set_dotted(merged, key, value)
    return validate_config(merged)


def validate_config(data: dict) -> JalaConfig:
    try:
        return JalaConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from e


def apply_overrides(config: JalaConfig, overrides) -> JalaConfig:
    data = config.model_dump(mode="json")
    for item in overrides:
        key, value = parse_override(item)
        data = _set_dotted(data, key, value)
    return validate_config(data)


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override must look like key=value: {item!r}")
    key, value = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"empty override key: {item!r}")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError:
        parsed = value
    return key, parsed


def config_hash(config: JalaConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def canonical_json(config: JalaConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def save_resolved(config: JalaConfig, out_dir: Path) -> str:
    """Write the resolved config snapshot and its hash; return the hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "config_hash.txt").write_text(digest + "\n")
    return digest


def bundled_config(name: str) -> Path:
    return BUNDLED_CONFIGS / f"{name}.json"


def _set_dotted(data: dict, key: str, value) -> dict:
    parts = key.split(".")
    result = _deep_merge(data, {})
    node = result
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value
    return result


def _deep_merge(base: dict, override: dict) -> dict:
    result = {k: (_deep_merge(v, {}) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = value
    return result
