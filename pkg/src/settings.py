"""
Configuration settings for SAHMM-VAE source separation experiments
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

# Default synthetic scenario
DEFAULT_T = 1000
DEFAULT_SEED = 7
DEFAULT_NUM_SOURCES = 2
DEFAULT_NUM_STATES = 2
DEFAULT_SELF_TRANSITION = 0.95
DEFAULT_SCENARIO = "gaussian-emission"
DEFAULT_MIXING_MATRIX = [[0.8, 0.6], [0.6, -0.8]]
DEFAULT_NOISE_STD = 0.01

# Width of the frozen hidden layer when the ground-truth mixing is an MLP
MLP_MIXING_HIDDEN = 16

# Model architecture
ENCODER_HIDDEN = (32, 32)
DECODER_HIDDEN_LINEAR = ()    # affine decoder for linear mixing
DECODER_HIDDEN_MLP = (32,)    # one tanh layer for MLP mixing
NUM_FLOW_LAYERS = 1

# Objective
BETA = 0.05
WARMUP_FRACTION = 0.1         # linear beta warm-up over the first 10% of epochs

# Optimiser (adaptive moments)
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Posterior log-variance at initialisation (sigma^2 = 1)
POSTERIOR_LOG_VAR_INIT = 0.0

# Training loop
EPOCHS = 3000
LOG_EVERY = 10

# Outputs
OUTPUT_DIR = "runs/default"
CSV_FLOAT_FORMAT = "%.9g"
LOCAL_OVERLAY_WINDOW = 200    # time steps shown in the source-state overlay figure

LOG_LEVEL = os.getenv("SAHMM_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    """Invalid settings or experiment configuration."""


def _raise_if(errors: list[str]) -> None:
    if errors:
        raise ConfigError("Configuration errors:\n" + "\n".join(f"- {e}" for e in errors))


def validate_settings():
    """Validate configuration settings"""
    errors = []

    if DEFAULT_T < 2:
        errors.append("DEFAULT_T must be at least 2")

    if DEFAULT_NUM_STATES < 1:
        errors.append("DEFAULT_NUM_STATES must be at least 1")

    if not (0 <= DEFAULT_SELF_TRANSITION <= 1):
        errors.append("DEFAULT_SELF_TRANSITION must be between 0 and 1")

    if BETA <= 0:
        errors.append("BETA must be positive")

    if LEARNING_RATE <= 0:
        errors.append("LEARNING_RATE must be positive")

    if not (0 <= WARMUP_FRACTION < 1):
        errors.append("WARMUP_FRACTION must be in [0, 1)")

    if not (0 < ADAM_BETA1 < 1 and 0 < ADAM_BETA2 < 1):
        errors.append("Adam moment decays must lie in (0, 1)")

    if len(DEFAULT_MIXING_MATRIX[0]) != DEFAULT_NUM_SOURCES:
        errors.append("DEFAULT_MIXING_MATRIX must have DEFAULT_NUM_SOURCES columns")

    _raise_if(errors)

    return True


validate_settings()


@dataclass
class EpisodeConfig:
    path: str | None = None
    scenario: str = DEFAULT_SCENARIO
    T: int = DEFAULT_T
    seed: int = DEFAULT_SEED
    num_sources: int = DEFAULT_NUM_SOURCES
    num_states: int = DEFAULT_NUM_STATES
    self_transition: float = DEFAULT_SELF_TRANSITION
    sources: list[dict[str, Any]] | None = None
    mixing: dict[str, Any] = field(
        default_factory=lambda: {
            "kind": "linear",
            "noise_std": DEFAULT_NOISE_STD,
        }
    )


@dataclass
class ModelConfig:
    branch: int = 1
    num_states: int | None = None  # None takes the episode's K
    beta: float = BETA
    learning_rate: float = LEARNING_RATE
    epochs: int = EPOCHS
    seed: int = 0
    encoder_hidden: tuple[int, ...] = ENCODER_HIDDEN
    decoder_hidden: tuple[int, ...] | None = None  # None picks by mixing kind
    warmup_fraction: float = WARMUP_FRACTION
    log_every: int = LOG_EVERY
    num_flow_layers: int = NUM_FLOW_LAYERS


@dataclass
class ExperimentConfig:
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    output_dir: str = OUTPUT_DIR
    plots: bool = True
    workers: int = 1


def _section(raw: dict[str, Any], cls: type, name: str, errors: list[str]) -> Any:
    known = set(cls.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        errors.append(f"unknown keys in {name}: {sorted(unknown)}")
    values = {k: v for k, v in raw.items() if k in known}
    for key in ("encoder_hidden", "decoder_hidden"):
        if values.get(key) is not None:
            values[key] = tuple(int(w) for w in values[key])
    return cls(**values)


def validate_experiment_config(config: ExperimentConfig) -> ExperimentConfig:
    """Check numeric ranges and referenced paths; raise one ConfigError listing every problem."""
    errors = []
    episode, model = config.episode, config.model

    if episode.path is not None:
        if not Path(episode.path).exists():
            errors.append(f"episode file not found: {episode.path}")
    else:
        if episode.T < 2:
            errors.append("episode.T must be at least 2")
        if episode.num_states < 1:
            errors.append("episode.num_states must be at least 1")
        if episode.num_sources < 1:
            errors.append("episode.num_sources must be at least 1")
        if not (0 <= episode.self_transition <= 1):
            errors.append("episode.self_transition must be between 0 and 1")
        if episode.mixing.get("kind", "linear") not in ("linear", "mlp"):
            errors.append("episode.mixing.kind must be 'linear' or 'mlp'")
        if episode.mixing.get("noise_std", DEFAULT_NOISE_STD) < 0:
            errors.append("episode.mixing.noise_std must be non-negative")

    if model.branch not in (1, 2, 3):
        errors.append("model.branch must be 1, 2 or 3")
    if model.num_states is not None and model.num_states < 1:
        errors.append("model.num_states must be at least 1")
    if model.beta <= 0:
        errors.append("model.beta must be positive")
    if model.learning_rate <= 0:
        errors.append("model.learning_rate must be positive")
    if model.epochs < 1:
        errors.append("model.epochs must be at least 1")
    if model.log_every < 1:
        errors.append("model.log_every must be at least 1")
    if not (0 <= model.warmup_fraction < 1):
        errors.append("model.warmup_fraction must be in [0, 1)")
    if model.num_flow_layers < 1:
        errors.append("model.num_flow_layers must be at least 1")
    if config.workers < 1:
        errors.append("workers must be at least 1")

    _raise_if(errors)
    return config


def load_experiment_config(
    path: str | Path, overrides: dict[str, Any] | None = None
) -> ExperimentConfig:
    """
    Load an experiment config from a JSON file.

    Args:
        path: JSON file with optional "episode", "model", "output_dir", "plots", "workers"
        overrides: CLI overrides; recognised keys are "seed", "epochs", "output_dir", "plots"

    Returns:
        Validated ExperimentConfig with defaults filled in

    Raises:
        ConfigError: If the file is missing, unparsable, or holds invalid values
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"Configuration errors:\n- config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration errors:\n- {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("Configuration errors:\n- top level must be an object")

    errors: list[str] = []
    unknown = set(raw) - {"episode", "model", "output_dir", "plots", "workers"}
    if unknown:
        errors.append(f"unknown top-level keys: {sorted(unknown)}")
    try:
        episode = _section(raw.get("episode", {}), EpisodeConfig, "episode", errors)
        model = _section(raw.get("model", {}), ModelConfig, "model", errors)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Configuration errors:\n- {e}") from e
    _raise_if(errors)

    if episode.path is not None and not Path(episode.path).is_absolute():
        episode.path = str((path.parent / episode.path).resolve())

    config = ExperimentConfig(
        episode=episode,
        model=model,
        output_dir=raw.get("output_dir", OUTPUT_DIR),
        plots=bool(raw.get("plots", True)),
        workers=int(raw.get("workers", 1)),
    )
    return validate_experiment_config(apply_overrides(config, overrides or {}))


def apply_overrides(config: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Apply CLI flags; a seed override reseeds both the episode and the model."""
    episode, model = config.episode, config.model
    if overrides.get("seed") is not None:
        episode = replace(episode, seed=int(overrides["seed"]))
        model = replace(model, seed=int(overrides["seed"]))
    if overrides.get("epochs") is not None:
        model = replace(model, epochs=int(overrides["epochs"]))
    config = replace(config, episode=episode, model=model)
    if overrides.get("output_dir") is not None:
        config = replace(config, output_dir=str(overrides["output_dir"]))
    if overrides.get("plots") is not None:
        config = replace(config, plots=bool(overrides["plots"]))
    return config
