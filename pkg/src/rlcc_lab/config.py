import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import toml

from .distill import FitConfig
from .policy import RewardParams
from .structs import ScenarioSpec, SimConfig
from .trainer import TrainConfig


CONFIG_DIR = Path.home() / ".config" / "rlcc-lab"
CONFIG_FILE = CONFIG_DIR / "config.toml"

PACKAGE_LOGGER = "rlcc_lab"


class ConfigError(ValueError):
    pass


def get_config_dir() -> Path:
    """Get the configuration directory, creating it if necessary."""
    CONFIG_DIR.mkdir(parents=True, exist_ok=True)
    return CONFIG_DIR


def load_config() -> dict[str, Any]:
    """Load the user configuration file."""
    if not CONFIG_FILE.exists():
        return {}
    try:
        return toml.load(CONFIG_FILE)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"{CONFIG_FILE}: {exc}") from exc


def get_config_value(key: str, default: Any = None) -> Any:
    """Get a configuration value by key (supports nested keys with dots)."""
    value = load_config()
    for k in key.split("."):
        if isinstance(value, dict) and k in value:
            value = value[k]
        else:
            return default
    return value


def get_env_or_config(env_key: str, config_key: str | None = None, default: Any = None) -> Any:
    """Get a value from environment variable or config file.

    Environment variables take precedence over config file values.
    """
    env_value = os.getenv(env_key)
    if env_value is not None:
        return env_value
    if config_key is None:
        config_key = env_key.lower()
    return get_config_value(config_key, default)


def init_config_file() -> Path:
    """Create a default config file if it doesn't exist."""
    get_config_dir()
    if not CONFIG_FILE.exists():
        default_config = """\
# rlcc-lab configuration

[logging]
# level = "WARNING"  # DEBUG, INFO, WARNING, ERROR, CRITICAL

[bench]
# threads = 4  # worker threads for sweeps and benchmark grids

[output]
# dir = "runs"  # default --out-dir
"""
        with open(CONFIG_FILE, "w") as f:
            f.write(default_config)
    return CONFIG_FILE


def configure_logging(level: str | None = None) -> None:
    """Set the package log level and attach a stderr handler once.

    Args:
        level: Log level for rlcc_lab (default from RLCC_LAB_LOG_LEVEL, config, or WARNING)
    """
    if level is None:
        level = get_env_or_config("RLCC_LAB_LOG_LEVEL", "logging.level", "WARNING")

    level_map = {
        "DEBUG": logging.DEBUG,
        "INFO": logging.INFO,
        "WARNING": logging.WARNING,
        "ERROR": logging.ERROR,
        "CRITICAL": logging.CRITICAL,
    }
    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(level_map.get(str(level).upper(), logging.WARNING))
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)


def output_dir(override: str | None = None) -> Path:
    return Path(override or get_env_or_config("RLCC_LAB_OUT_DIR", "output.dir", "runs"))


# ============================================================================
# Experiment files
# ============================================================================

SECTIONS = ("sim", "scenario", "controller", "reward", "train", "distill")


@dataclass
class Experiment:
    sim: SimConfig = field(default_factory=SimConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    # "kind" plus controller-specific options, validated when the factory is built
    controller: dict[str, Any] = field(default_factory=dict)
    reward: RewardParams = field(default_factory=RewardParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: FitConfig = field(default_factory=FitConfig)
    # distill-only keys that are not part of FitConfig
    n_samples: int = 100_000


def _build(cls, section: str, values: dict[str, Any], extra: frozenset[str] = frozenset()):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known - extra
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: v for k, v in values.items() if k in known})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_experiment(data: dict[str, Any]) -> Experiment:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}, expected {', '.join(SECTIONS)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a section of key = value pairs")

    distill = dict(data.get("distill", {}))
    exp = Experiment(
        sim=_build(SimConfig, "sim", data.get("sim", {})),
        controller=dict(data.get("controller", {})),
        reward=_build(RewardParams, "reward", data.get("reward", {})),
        train=_build(TrainConfig, "train", data.get("train", {})),
        distill=_build(FitConfig, "distill", distill, frozenset({"n_samples"})),
    )
    exp.scenario = _build(ScenarioSpec, "scenario", data.get("scenario", {}))
    try:
        exp.scenario.validate(exp.sim)
    except ValueError as exc:
        raise ConfigError(f"[scenario]: {exc}") from exc
    if "n_samples" in distill:
        exp.n_samples = int(distill["n_samples"])
    return exp


def load_experiment(path: str | Path | None) -> Experiment:
    """Read an experiment file; no path gives the defaults."""
    if path is None:
        return Experiment()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"experiment file not found: {path}")
    try:
        data = toml.load(path)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_experiment(data)
