"""Configuration records for the model, losses and training runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

FRAME_RATE = 30


@dataclass(frozen=True)
class FeatureToggles:
    use_images: bool = True
    use_flow: bool = True
    use_scene_attrs: bool = True


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 64
    lstm_hidden: int = 512
    lstm_layers: int = 2
    mlp_width: int = 64
    convlstm_filters: int = 32
    convlstm_kernel: int = 5
    convlstm_stride: int = 2
    convlstm_blocks: int = 3
    pool_size: int = 2
    flow_backbone: str = "small-cnn"  # or "residual-50"
    flow_channels: int = 32
    flow_spatial_pool: str = "max"  # or "mean"
    gf_img_dim: int = 256
    gf_o_dim: int = 128
    image_size: tuple[int, int] = (240, 420)
    # per-step input widths; set from the attribute vocabulary
    pv_width: int = 8
    attrs_width: int = 10
    behavior_width: int = 12
    scene_width: int = 20
    toggles: FeatureToggles = field(default_factory=FeatureToggles)

    def __post_init__(self):
        for name in ("latent_dim", "lstm_hidden", "lstm_layers", "mlp_width",
                     "convlstm_filters", "convlstm_kernel", "convlstm_stride",
                     "convlstm_blocks", "pool_size", "flow_channels", "gf_img_dim", "gf_o_dim",
                     "pv_width", "attrs_width", "behavior_width", "scene_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.flow_backbone not in ("small-cnn", "residual-50"):
            raise ValueError(f"unknown flow backbone {self.flow_backbone!r}")
        if self.flow_spatial_pool not in ("max", "mean"):
            raise ValueError(f"unknown flow pooling {self.flow_spatial_pool!r}")

    @property
    def path_dims(self) -> dict[str, int]:
        return {
            "pv": self.latent_dim,
            "lcf_p": self.mlp_width,
            "lcf_b": self.latent_dim,
            "lcf_s": self.latent_dim,
            "gf_img": self.gf_img_dim,
            "gf_o": self.gf_o_dim,
        }

    @property
    def fused_dim(self) -> int:
        return sum(self.path_dims.values())


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    lambda_traj: float = 1.0
    lambda_int: float = 1.0
    epsilon: float = 1e-7
    reconstruction_reg: bool = False

    def __post_init__(self):
        if min(self.beta, self.lambda_traj, self.lambda_int) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


@dataclass(frozen=True)
class DecoderConfig:
    offset_output: bool = True  # False: head emits absolute boxes
    couple_intention: bool = False  # feed trajectory predictions to the intention decoder


@dataclass(frozen=True)
class TrainConfig:
    m: int = 16
    horizon_seconds: float = 0.5
    lr_init: float = 1e-4
    lr_power: float = 0.9
    max_epoch: int = 200
    batch_size: int = 4
    adam_epsilon: float = 1e-9
    weight_decay: float = 1e-4
    seed: int = 0
    stride: int = 1
    normalize: str = "none"
    train_data: str = ""
    val_data: str = ""
    out_dir: str = "runs/ptinet"
    allow_prefix_eval: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be at least 2")
        for name in ("horizon_seconds", "lr_init", "lr_power", "max_epoch", "batch_size",
                     "adam_epsilon", "stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.normalize not in ("none", "scale-to-unit"):
            raise ValueError(f"unknown normalize mode {self.normalize!r}")
        if self.n < 1:
            raise ValueError("horizon too short: n < 1")

    @property
    def n(self) -> int:
        return int(round(self.horizon_seconds * FRAME_RATE))


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def _build(cls, data: dict[str, Any]):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        sub = _NESTED.get((cls, key))
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (TrainConfig, "loss"): LossConfig,
    (TrainConfig, "encoder"): EncoderConfig,
    (TrainConfig, "decoder"): DecoderConfig,
    (EncoderConfig, "toggles"): FeatureToggles,
}


def train_config_from_dict(data: dict[str, Any]) -> TrainConfig:
    return _build(TrainConfig, data)


def _coerce(text: str, current: Any) -> Any:
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    return text.strip()


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply dotted ``key=value`` string overrides, e.g. ``loss.beta=0.5``."""
    data = to_dict(cfg)
    for dotted, text in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise KeyError(f"unknown config key {dotted!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise KeyError(f"unknown config key {dotted!r}")
        node[leaf] = _coerce(text, node[leaf])
    return train_config_from_dict(data)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat ``key=value`` format; ``#`` starts a comment."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def desk_encoder_config(**overrides) -> EncoderConfig:
    """Reduced widths and a 64x112 raster for single-CPU experiments."""
    base = dict(
        latent_dim=32,
        lstm_hidden=128,
        lstm_layers=2,
        mlp_width=16,
        convlstm_filters=8,
        flow_channels=8,
        gf_img_dim=32,
        gf_o_dim=32,
        image_size=(64, 112),
    )
    base.update(overrides)
    return EncoderConfig(**base)


def desk_train_config(encoder: EncoderConfig | None = None, **overrides) -> TrainConfig:
    """Training settings for desk-scale synthetic experiments.

    Compared with the full-scale defaults: a 10x larger initial rate, since
    runs last tens of epochs instead of 200; beta 0.1, because beta 1 collapses
    the small posteriors onto the prior; and intention weighted 5x, because
    the pixel RMSE otherwise dominates the gradient.
    """
    base = dict(
        lr_init=1e-3,
        max_epoch=30,
        loss=LossConfig(beta=0.1, lambda_int=5.0),
        encoder=encoder or desk_encoder_config(),
    )
    base.update(overrides)
    return TrainConfig(**base)
