"""Configuration management for Dialogue Lab."""

import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional

import yaml

from .transformer import ModelConfig

CONFIG_PATH_ENV = 'DLAB_CONFIG_PATH'
SECTIONS = ('paths', 'training', 'decoding', 'synth')


@dataclass
class RunConfig:
    """Settings of one command-line run."""

    command: str = ''
    framework: Optional[str] = None
    objective: Optional[str] = None

    # paths
    corpus: Optional[str] = None
    vocab: Optional[str] = None
    init: Optional[str] = None
    out: Optional[str] = None
    hyp: Optional[str] = None
    ref: Optional[str] = None
    source: Optional[str] = None
    calibration: Optional[str] = None

    # training
    steps: int = 2000
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    mask_rate: float = 0.4
    interval: int = 5
    fg_coverage: float = 1.0
    subset: Optional[int] = None
    force_lineage: bool = False
    log_every: int = 50
    min_freq: int = 1

    # decoding
    beam_size: int = 4
    min_len: Optional[int] = None
    max_len: int = 36
    workers: int = 1

    # synth
    task: Optional[str] = None
    size: int = 1000

    model: Dict[str, Any] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load run settings from a YAML file.

    Keys may be flat or grouped under paths/training/decoding/synth sections;
    model hyperparameters go under `model`.

    Args:
        config_path: Path to configuration file; defaults to $DLAB_CONFIG_PATH

    Returns:
        Flat dict of settings (model settings as a nested dict)

    Raises:
        FileNotFoundError: If config file doesn't exist
        yaml.YAMLError: If config file is invalid
        ValueError: If the configuration is invalid
    """
    config_path = config_path or os.environ.get(CONFIG_PATH_ENV)
    if not config_path:
        return {}
    if not os.path.exists(config_path):
        raise FileNotFoundError(
            f"Configuration file not found at {config_path}. "
            "Copy config.example.yaml and adjust it, or drop --config."
        )

    with open(config_path, 'r') as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"Configuration file {config_path} must contain a mapping")

    config: Dict[str, Any] = {}
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"Configuration section {key} must be a mapping")
            config.update(value)
        else:
            config[key] = value

    validate_config(config)
    return config


def validate_config(config: Dict[str, Any]) -> None:
    """
    Validate configuration keys and values.

    Args:
        config: Flat configuration dictionary

    Raises:
        ValueError: If configuration is invalid
    """
    for key in config:
        if key not in FIELD_TYPES:
            raise ValueError(f"Unknown configuration key: {key}")

    if 'model' in config:
        if not isinstance(config['model'], dict):
            raise ValueError("Configuration section model must be a mapping")
        ModelConfig.from_dict(config['model'])

    positive = ('steps', 'batch_size', 'interval', 'beam_size', 'max_len', 'workers', 'size', 'min_freq', 'log_every')
    for key in positive:
        if key in config and (not isinstance(config[key], int) or config[key] < 1):
            if key == 'steps' and config[key] == 0:
                continue
            raise ValueError(f"{key} must be a positive integer")
    for key in ('subset', 'min_len'):
        if config.get(key) is not None and (not isinstance(config[key], int) or config[key] < 1):
            raise ValueError(f"{key} must be a positive integer")
    if 'mask_rate' in config and not 0 < float(config['mask_rate']) <= 1:
        raise ValueError("mask_rate must lie in (0, 1]")
    if 'fg_coverage' in config and not 0 < float(config['fg_coverage']) <= 1:
        raise ValueError("fg_coverage must lie in (0, 1]")
    if 'lr' in config and float(config['lr']) <= 0:
        raise ValueError("lr must be positive")
    if config.get('min_len') and config.get('max_len') and config['min_len'] > config['max_len']:
        raise ValueError("min_len must not exceed max_len")


def build_run_config(flags: Dict[str, Any], file_values: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Merge settings: command-line flags over the config file over defaults.

    Args:
        flags: Parsed flags; None means "not given"
        file_values: Output of load_config

    Returns:
        RunConfig
    """
    merged: Dict[str, Any] = dict(file_values or {})
    for key, value in flags.items():
        if key in FIELD_TYPES and value is not None:
            merged[key] = value
    validate_config({k: v for k, v in merged.items() if k != 'command'})
    return RunConfig(**merged)
