import dataclasses
import logging
import os
import tomllib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import tomli_w

from scotopic.decision.thresholds import AnnealConfig
from scotopic.errors import ConfigError
from scotopic.models.training import ModelConfig, TrainConfig
from scotopic.sensor.photon_sim import NoiseConfig
from scotopic.tools.http import MNIST_FILES

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.toml"
# Sections read by the workspace getters below; everything else must be an experiment section.
WORKSPACE_SECTIONS = ("paths", "logging", "runtime")
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
NOISE_PARAMETERS = ("dark_current", "fpn_std", "read_noise_std", "jitter_std")

_workspace_dir = os.path.abspath(os.getcwd())

def set_workspace_dir(path: str):
    """Sets the workspace directory, resolving it to an absolute path."""
    global _workspace_dir
    _workspace_dir = os.path.abspath(path)
    # Clear parsed config cache so it re-reads from the new workspace if needed
    __get_parsed_config.cache_clear()

def get_workspace_dir() -> str:
    """Returns the workspace directory path."""
    return _workspace_dir

def init_config():
    """Explicitly initializes the configuration to inject env vars early."""
    __get_parsed_config()

@lru_cache(maxsize=1)
def __get_parsed_config() -> dict:
    """Reads and parses the workspace config.toml file once."""
    config_path = os.path.join(get_workspace_dir(), CONFIG_NAME)
    if os.path.exists(config_path):
        try:
            with open(config_path, "rb") as f:
                config_data = tomllib.load(f)
                _inject_env_vars(config_data)
                return config_data
        except tomllib.TOMLDecodeError as e:
            logger.warning(f"Failed to parse {config_path}: {e}")
    return {}

def _inject_env_vars(config_data: dict):
    """Pins BLAS/OpenMP thread counts so floating-point reductions run in a fixed order."""
    runtime = config_data.get("runtime", {})
    if "num_threads" in runtime:
        for key in THREAD_ENV_VARS:
            os.environ[key] = str(runtime["num_threads"])

def _get_setting(section: str, key: str, default: Any = None) -> Any:
    """Helper to get a setting from TOML first, then default."""
    config_data = __get_parsed_config()
    if section in config_data and key in config_data[section]:
        return config_data[section][key]

    return default

def _resolve(path: str) -> str:
    if os.path.isabs(path):
        return path
    return os.path.join(get_workspace_dir(), path)

def get_config_path() -> str:
    """Returns the path of the workspace config.toml."""
    return os.path.join(get_workspace_dir(), CONFIG_NAME)

def get_output_dir() -> str:
    """Returns the output directory path (CSVs, models, manifests)."""
    return _resolve(_get_setting("paths", "output_dir", default="results"))

def get_data_dir() -> str:
    """Returns the directory holding the IDX dataset files."""
    return _resolve(_get_setting("paths", "data_dir", default="data/mnist"))

def get_log_level() -> str:
    return str(_get_setting("logging", "level", default="WARNING")).upper()


@dataclass(frozen=True)
class DataConfig:
    """IDX files relative to ``data_dir`` (default: [paths] data_dir); subset 0 keeps all examples."""

    data_dir: str = ""
    train_images: str = MNIST_FILES["train_images"]
    train_labels: str = MNIST_FILES["train_labels"]
    test_images: str = MNIST_FILES["test_images"]
    test_labels: str = MNIST_FILES["test_labels"]
    train_subset: int = 10000
    test_subset: int = 2000

    def __post_init__(self):
        if self.train_subset < 0 or self.test_subset < 0:
            raise ConfigError(f"subset sizes must be >= 0, got {self.train_subset}, {self.test_subset}")

    def directory(self) -> str:
        return _resolve(self.data_dir) if self.data_dir else get_data_dir()

    def path(self, name: str) -> str:
        return os.path.join(self.directory(), getattr(self, name))

    def missing_files(self) -> list[str]:
        names = ("train_images", "train_labels", "test_images", "test_labels")
        return [self.path(n) for n in names if not os.path.exists(self.path(n))]


@dataclass(frozen=True)
class DecisionConfig:
    regime: str = "FR"
    thresholds: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0)
    int_ppps: tuple[float, ...] = (0.22, 2.2, 22.0, 220.0)
    etas: tuple[float, ...] = (0.001, 0.01)
    query_ppp_min: float = 0.22
    max_ppp: float = 220.0
    query_points: int = 50
    workers: int = 1
    bootstrap_resamples: int = 1000
    tune_examples: int = 1000
    noise_parameter: str = "read_noise_std"
    noise_values: tuple[float, ...] = (0.0, 0.15, 0.22, 0.5)

    def __post_init__(self):
        for name in ("thresholds", "int_ppps", "etas", "noise_values"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.regime not in ("FR", "INT"):
            raise ConfigError(f"regime must be FR or INT, got {self.regime!r}")
        if not 0 < self.query_ppp_min < self.max_ppp:
            raise ConfigError(f"need 0 < query_ppp_min < max_ppp, got {self.query_ppp_min}, {self.max_ppp}")
        if any(p <= 0 or p > self.max_ppp for p in self.int_ppps):
            raise ConfigError(f"int_ppps must lie in (0, max_ppp], got {self.int_ppps}")
        if any(e < 0 for e in self.etas):
            raise ConfigError(f"etas must be >= 0, got {self.etas}")
        if min(self.query_points, self.workers, self.bootstrap_resamples, self.tune_examples) < 1:
            raise ConfigError("query_points, workers, bootstrap_resamples and tune_examples must be >= 1")
        if self.noise_parameter not in NOISE_PARAMETERS:
            raise ConfigError(f"unknown noise parameter {self.noise_parameter!r}, expected one of {NOISE_PARAMETERS}")


@dataclass(frozen=True)
class SpikingConfig:
    taus: tuple[float, ...] = (0.05, 0.1, 0.2, 0.4, 0.8)
    threshold: float = 3.0
    examples: int = 200

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(float(v) for v in self.taus))
        if any(t <= 0 for t in self.taus):
            raise ConfigError(f"tau_dis values must be > 0, got {self.taus}")
        if self.examples < 1:
            raise ConfigError(f"examples must be >= 1, got {self.examples}")


@dataclass(frozen=True)
class LightConfig:
    ppps: tuple[float, ...] = (0.22, 2.2, 22.0, 220.0)
    train_images: int = 200
    eval_images: int = 200
    box_sizes: tuple[int, ...] = (1, 2, 3, 4, 5, 7)
    top_ks: tuple[int, ...] = (1, 3, 5, 10, 25)

    def __post_init__(self):
        object.__setattr__(self, "ppps", tuple(float(v) for v in self.ppps))
        object.__setattr__(self, "box_sizes", tuple(int(v) for v in self.box_sizes))
        object.__setattr__(self, "top_ks", tuple(int(v) for v in self.top_ks))
        if not self.ppps or any(p <= 0 for p in self.ppps):
            raise ConfigError(f"light ppps must be > 0, got {self.ppps}")
        if self.train_images < 1 or self.eval_images < 1:
            raise ConfigError("train_images and eval_images must be >= 1")


@dataclass(frozen=True)
class ExposureConfig:
    illuminances: tuple[float, ...] = (1e-3, 1.0, 250.0)
    times: tuple[float, ...] = (1 / 500, 1 / 128, 1 / 8, 1.0, 8.0, 60.0)

    def __post_init__(self):
        object.__setattr__(self, "illuminances", tuple(float(v) for v in self.illuminances))
        object.__setattr__(self, "times", tuple(float(v) for v in self.times))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = ""

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    spiking: SpikingConfig = field(default_factory=SpikingConfig)
    light: LightConfig = field(default_factory=LightConfig)
    exposure: ExposureConfig = field(default_factory=ExposureConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def output_dir(self) -> str:
        return _resolve(self.run.output_dir) if self.run.output_dir else get_output_dir()

    def with_overrides(self, seed: int | None = None, out: str | None = None, subset: int | None = None) -> "ExperimentConfig":
        """Applies the CLI's --seed/--out/--subset flags."""
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(
                cfg,
                run=dataclasses.replace(cfg.run, seed=seed),
                train=dataclasses.replace(cfg.train, seed=seed),
            )
        if out is not None:
            cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, output_dir=os.path.abspath(out)))
        if subset is not None:
            test = min(subset, cfg.data.test_subset) if cfg.data.test_subset else subset
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, train_subset=subset, test_subset=test))
        return cfg


def _section_types() -> dict[str, type]:
    return {f.name: f.default_factory().__class__ for f in dataclasses.fields(ExperimentConfig)}


def _build_section(name: str, cls: type, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from e


def experiment_config_from_dict(data: dict) -> ExperimentConfig:
    sections = _section_types()
    unknown = sorted(set(data) - set(sections) - set(WORKSPACE_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    return ExperimentConfig(**{
        name: _build_section(name, cls, data[name])
        for name, cls in sections.items()
        if name in data
    })


def experiment_config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        f.name: {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(getattr(cfg, f.name)).items()}
        for f in dataclasses.fields(cfg)
    }


def load_experiment_config(path: str | None = None) -> ExperimentConfig:
    """
    Parses an experiment config (the workspace config.toml by default).
    A missing default file yields the built-in defaults; a missing explicit path is an error.
    """
    if path is None:
        path = get_config_path()
        if not os.path.exists(path):
            logger.info(f"No {CONFIG_NAME} in {get_workspace_dir()}, using defaults")
            data = {}
        else:
            data = _read_toml(path)
    else:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        data = _read_toml(path)

    return experiment_config_from_dict(data)


def _read_toml(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"failed to parse {path}: {e}") from e


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(experiment_config_to_dict(cfg))
