"""Joint pedestrian trajectory and crossing-intention prediction."""

from .config import (DecoderConfig, EncoderConfig, FeatureToggles, LossConfig, TrainConfig,
                     desk_encoder_config, desk_train_config)
from .model import PTINet

__all__ = [
    "DecoderConfig",
    "EncoderConfig",
    "FeatureToggles",
    "LossConfig",
    "PTINet",
    "TrainConfig",
    "desk_encoder_config",
    "desk_train_config",
]

__version__ = "0.1.0"
