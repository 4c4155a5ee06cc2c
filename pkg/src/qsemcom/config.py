"""System configuration: nested dataclasses, YAML loading, dotted-path access.

Every field is addressable by a dotted path (e.g. ``train.lr_gen``); unknown
keys in a config file are hard errors.  The desk-scale defaults below drive a
tiny trainable backbone instead of a pretrained dual encoder, but keep the
same pipeline geometry (patch grid, segment quantization, decoder stages).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    backbone: str = "tiny"  # tiny | pretrained-dual-encoder
    backbone_depth: int = 6
    backbone_heads: int = 4
    # One decoder stage per selected layer; 2**len(selection) must equal
    # patch_size so the stage-doubling chain lands back on image_size.
    layer_selection: tuple[int, ...] = (2, 4, 6)
    num_text_embeddings: int = 16
    pretrained_path: str | None = None
    text_alignment: bool = True


@dataclass
class QuantizerConfig:
    segment_length: int = 32
    codeword_count: int = 64
    kmeans_iters: int = 25
    revive_threshold: float = 0.01  # fraction of uniform usage share


@dataclass
class PhyConfig:
    scheme: str = "ldpc-3-6"  # none | repetition-3 | ldpc-3-6
    fading: bool = True
    eval_snr_grid_db: tuple[float, ...] = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
    ldpc_block_length: int = 1024
    calibration_trials: int = 20000


@dataclass
class TrainConfig:
    epochs_phase1: int = 20
    epochs_phase2: int = 5
    lr_gen: float = 1e-4
    lr_dis: float = 2e-4
    lambda_user: float = 0.5
    lambda_quant: float = 1.0
    lambda_gen: float = 0.1
    beta: float = 0.25
    batch_size: int = 16
    snr_grid_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    checkpoint_keep: int = 3


@dataclass
class ScorerConfig:
    kind: str = "proxy"  # proxy | external
    model_path: str | None = None
    prompt_template: str | None = None
    token_scope: str = "all"  # all | image


@dataclass
class DataConfig:
    root: str | None = None
    synthetic_n: int = 256
    val_fraction: float = 0.2
    zero_shot_exclude: tuple[str, ...] = ("triangle",)


@dataclass
class SystemConfig:
    seed: int = 7
    model: ModelConfig = field(default_factory=ModelConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    phy: PhyConfig = field(default_factory=PhyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    # Derived quantities ---------------------------------------------------

    @property
    def n_image_tokens(self) -> int:
        g = self.model.image_size // self.model.patch_size
        return g * g

    @property
    def n_segments(self) -> int:
        return self.model.embed_dim // self.quantizer.segment_length

    @property
    def n_stages(self) -> int:
        return len(self.model.layer_selection)

    def validate(self) -> "SystemConfig":
        m, q, t = self.model, self.quantizer, self.train
        if m.image_size <= 0 or m.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if m.image_size % m.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if m.embed_dim % q.segment_length != 0:
            raise ConfigError(
                f"embed_dim {m.embed_dim} not divisible by segment_length "
                f"{q.segment_length}"
            )
        if q.codeword_count < 2:
            raise ConfigError("codeword_count must be at least 2")
        sel = tuple(m.layer_selection)
        if not sel:
            raise ConfigError("layer_selection must be non-empty")
        if sel != tuple(sorted(set(sel))):
            raise ConfigError("layer_selection must be strictly increasing")
        if sel[0] < 1 or sel[-1] > m.backbone_depth:
            raise ConfigError(
                f"layer_selection {sel} outside 1..{m.backbone_depth}"
            )
        if 2 ** len(sel) != m.patch_size:
            raise ConfigError(
                f"2**len(layer_selection) = {2 ** len(sel)} must equal "
                f"patch_size {m.patch_size} for the decoder stage chain to "
                f"recover the image resolution"
            )
        if m.backbone not in ("tiny", "pretrained-dual-encoder"):
            raise ConfigError(f"unknown backbone {m.backbone!r}")
        if self.phy.scheme not in ("none", "repetition-3", "ldpc-3-6"):
            raise ConfigError(f"unknown coding scheme {self.phy.scheme!r}")
        if self.scorer.kind not in ("proxy", "external"):
            raise ConfigError(f"unknown scorer kind {self.scorer.kind!r}")
        if self.scorer.token_scope not in ("all", "image"):
            raise ConfigError(f"unknown token_scope {self.scorer.token_scope!r}")
        if t.epochs_phase1 < 1 or t.epochs_phase2 < 1:
            raise ConfigError("epochs_phase1 and epochs_phase2 must be >= 1")
        for name in ("lambda_user", "lambda_quant", "lambda_gen", "beta"):
            if getattr(t, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.phy.eval_snr_grid_db or not t.snr_grid_db:
            raise ConfigError("SNR grids must be non-empty")
        return self


_SECTIONS = {
    "model": ModelConfig,
    "quantizer": QuantizerConfig,
    "phy": PhyConfig,
    "train": TrainConfig,
    "scorer": ScorerConfig,
    "data": DataConfig,
}


def _coerce(value: Any, target: Any) -> Any:
    # YAML gives lists; several fields are stored as tuples.
    if isinstance(target, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def config_from_dict(raw: dict[str, Any]) -> SystemConfig:
    """Build a validated SystemConfig from a nested dict; unknown keys error."""
    cfg = SystemConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        section = getattr(cfg, key)
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        valid = {f.name for f in dataclasses.fields(section)}
        for sub, subval in value.items():
            if sub not in valid:
                raise ConfigError(f"unknown config key {key}.{sub!r}")
            setattr(section, sub, _coerce(subval, getattr(section, sub)))
    return cfg.validate()


def load_config(path: str | Path) -> SystemConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(raw)


def config_to_dict(cfg: SystemConfig) -> dict[str, Any]:
    def unwrap(obj: Any) -> Any:
        if dataclasses.is_dataclass(obj):
            return {f.name: unwrap(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [unwrap(v) for v in obj]
        return obj

    return unwrap(cfg)


def get_path(cfg: SystemConfig, dotted: str) -> Any:
    """Fetch any config field by dotted path, e.g. ``train.lr_gen``."""
    obj: Any = cfg
    for part in dotted.split("."):
        if not dataclasses.is_dataclass(obj) or part not in {
            f.name for f in dataclasses.fields(obj)
        }:
            raise ConfigError(f"unknown config path {dotted!r}")
        obj = getattr(obj, part)
    return obj


def set_path(cfg: SystemConfig, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    obj: Any = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {
            f.name for f in dataclasses.fields(obj)
        }:
            raise ConfigError(f"unknown config path {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {
        f.name for f in dataclasses.fields(obj)
    }:
        raise ConfigError(f"unknown config path {dotted!r}")
    setattr(obj, leaf, _coerce(value, getattr(obj, leaf)))


def config_hash(cfg: SystemConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
