"""
Configuration management for the dense face alignment pipeline.

A run configuration is a YAML file with one mapping per section. Every key has a built-in
default; keys the defaults do not know are rejected. The run seed is the only seed: it is
handed to every section that draws random numbers.
"""

import copy
import logging
import os
from dataclasses import asdict
from typing import Any, Dict, Iterable, Optional

import yaml

from dense_face_alignment.errors import ConfigError
from dense_face_alignment.evalkit import SUBSETS
from dense_face_alignment.fit import SolverOptions
from dense_face_alignment.flownet import NetworkSpec
from dense_face_alignment.procedural import ModelGenConfig
from dense_face_alignment.raster import DataGenConfig
from dense_face_alignment.training import StageSchedule, TrainSchedule

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.yaml"
BENCH_MODES = ("network", "perfect")


def _without_seed(values: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in values.items() if k != "seed"}


def default_config() -> Dict[str, Any]:
    """Built-in defaults for every section."""
    train = asdict(TrainSchedule())
    return {
        "run": {"seed": 0, "output_dir": "output", "threads": 1, "model_path": ""},
        "model": _without_seed(asdict(ModelGenConfig())),
        "datagen": _without_seed(asdict(DataGenConfig())),
        "network": NetworkSpec().to_dict(),
        "train": _without_seed(train),
        "fit": dict(asdict(SolverOptions()), image="", weights="", gt_flow="", use_network=True),
        "bench": {"root": "", "weights": "", "mode": "network", "subsets": ["all", "visible_inner"],
                  "match_threshold": 0.5},
        "render": {"count": 4},
    }


def _merge(base: Dict[str, Any], override: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{path}{key}"
        if key not in base:
            kind = "section" if not path else "key"
            raise ConfigError(f"Unknown configuration {kind}: {name}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Configuration {name} must be a mapping")
            merged[key] = _merge(base[key], value, f"{name}.")
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load configuration from a YAML file, merged over the defaults.

    Args:
        config_path: Path to the configuration file; None gives the defaults

    Returns:
        Dictionary containing configuration values

    Raises:
        FileNotFoundError: If the configuration file doesn't exist
        ConfigError: If the configuration is unparsable or invalid
    """
    config = default_config()
    if config_path is None:
        validate_config(config)
        return config
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    try:
        with open(config_path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse configuration file: {str(e)}")
    if not isinstance(loaded, dict):
        raise ConfigError(f"Configuration file {config_path} must hold a mapping of sections")

    config = _merge(config, loaded)
    validate_config(config)
    return config


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply ``section.key=value`` overrides; values are parsed as YAML scalars.

    Raises:
        ConfigError: On a malformed override or an unknown key
    """
    config = copy.deepcopy(config)
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Override '{override}' is not of the form section.key=value")
        dotted, raw = override.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) < 2:
            raise ConfigError(f"Override '{override}' must name a section and a key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value of override '{override}': {str(e)}")
        node: Dict[str, Any] = {}
        nested = node
        for part in parts[:-1]:
            nested[part] = {}
            nested = nested[part]
        nested[parts[-1]] = value
        config = _merge(config, node)
        logger.debug(f"Override {dotted} = {value!r}")
    return config


def validate_config(config: Dict[str, Any]) -> None:
    """
    Validate that the configuration has only known keys with in-range values.

    Args:
        config: Configuration dictionary to validate

    Raises:
        ConfigError: If a key is unknown or a value is out of range
    """
    _merge(default_config(), config)
    run = config["run"]
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        raise ConfigError("run.seed must be a non-negative integer")
    if not isinstance(run["threads"], int) or run["threads"] < 1:
        raise ConfigError("run.threads must be a positive integer")
    if not run["output_dir"]:
        raise ConfigError("run.output_dir must not be empty")

    # building the typed views runs their range checks
    try:
        model_config(config)
        datagen_config(config)
        network_spec(config)
        train_schedule(config)
        solver_options(config)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration value: {str(e)}")

    bench = config["bench"]
    if bench["mode"] not in BENCH_MODES:
        raise ConfigError(f"bench.mode must be one of {', '.join(BENCH_MODES)}")
    if not 0.0 <= bench["match_threshold"] <= 1.0:
        raise ConfigError("bench.match_threshold must lie in [0, 1]")
    unknown_subsets = [s for s in bench["subsets"] if s not in SUBSETS]
    if unknown_subsets or not bench["subsets"]:
        raise ConfigError(f"bench.subsets must be a non-empty list drawn from {', '.join(SUBSETS)}")
    if config["render"]["count"] < 1:
        raise ConfigError("render.count must be at least 1")

    logger.debug("Configuration validation successful")


def model_config(config: Dict[str, Any]) -> ModelGenConfig:
    return ModelGenConfig.from_dict(dict(config["model"], seed=config["run"]["seed"]))


def datagen_config(config: Dict[str, Any]) -> DataGenConfig:
    return DataGenConfig.from_dict(dict(config["datagen"], seed=config["run"]["seed"]))


def network_spec(config: Dict[str, Any]) -> NetworkSpec:
    return NetworkSpec.from_dict(config["network"])


def train_schedule(config: Dict[str, Any]) -> TrainSchedule:
    values = dict(config["train"], seed=config["run"]["seed"])
    for stage in ("pretrain", "finetune"):
        values[stage] = StageSchedule.from_dict(dict(values[stage]), f"train.{stage}")
    return TrainSchedule.from_dict(values)


def solver_options(config: Dict[str, Any]) -> SolverOptions:
    inputs = ("image", "weights", "gt_flow", "use_network")
    return SolverOptions.from_dict({k: v for k, v in config["fit"].items() if k not in inputs})


def write_resolved_config(config: Dict[str, Any], output_dir: str) -> str:
    """Snapshot the effective configuration next to a run's outputs."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, RESOLVED_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config, f, default_flow_style=False, sort_keys=True)
    return path
