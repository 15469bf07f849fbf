"""Orchestration: configuration, data, training loop, checkpointing, inference, CLI."""

from .config import TrainConfig, load_config, save_config

__all__ = ["TrainConfig", "load_config", "save_config"]
