"""Detector assembly, configuration, and checkpoints."""
from .checkpoint import (CheckpointError, decode_container, encode_container, load_checkpoint, load_state,
                         read_container, save_checkpoint, write_container)
from .config import LEVELS, STRIDES, ConfigError, ModelConfig, toy_config
from .network import FeaturePyramid, HMPNet, LevelOutput, build

__all__ = [
    "CheckpointError", "decode_container", "encode_container", "load_checkpoint", "load_state",
    "read_container", "save_checkpoint", "write_container", "LEVELS", "STRIDES", "ConfigError", "ModelConfig",
    "toy_config", "FeaturePyramid", "HMPNet", "LevelOutput", "build",
]
