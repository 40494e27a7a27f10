"""
Run configuration: a tree of dataclasses persisted as JSON.

Unknown keys are rejected, so a typo in a config file fails loudly instead of
silently falling back to a default.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from logging_config import setup_logger
from src.data_transformation.data_manager import DEFAULT_MANIFEST_PATH
from src.data_transformation.preprocess import REFERENCE_POLICIES, WindowSpec
from src.data_transformation.synthetic import SynthesisSpec
from src.model.config import ModelConfig, TrainConfig


LOGGER = setup_logger()

WORKERS_ENV = "PRIMCOUNT_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data_root: Optional[str] = None  # None: <output_dir>/dataset
    output_dir: str = "out"
    manifest: str = DEFAULT_MANIFEST_PATH


@dataclass(frozen=True)
class WindowConfig:
    window_s: float = 6.0
    core_s: float = 4.0
    train_slide_s: float = 0.5
    test_slide_s: float = 4.0
    sample_rate_hz: float = 100.0
    min_overlap_frames: int = 5
    max_tokens: int = 16
    reference_policy: str = "first_frame"

    def __post_init__(self):
        if self.reference_policy not in REFERENCE_POLICIES:
            raise ValueError(
                f"reference_policy must be one of {REFERENCE_POLICIES}, got '{self.reference_policy}'"
            )
        if self.min_overlap_frames < 1:
            raise ValueError("min_overlap_frames must be at least 1")
        self.spec()

    def spec(self) -> WindowSpec:
        return WindowSpec(
            window_s=self.window_s,
            core_s=self.core_s,
            train_slide_s=self.train_slide_s,
            test_slide_s=self.test_slide_s,
            sample_rate_hz=self.sample_rate_hz,
        )


@dataclass(frozen=True)
class ModelSection:
    input_dim: int = 77
    hidden_dim: int = 64
    embed_dim: int = 16
    cell: str = "gru"
    attention: bool = False


@dataclass(frozen=True)
class SmootherConfig:
    window_length: int = 101
    beta: float = 2.0
    attenuation_db: Optional[float] = None  # overrides beta when set
    select: bool = True
    window_lengths: list = field(default_factory=lambda: [25, 51, 101, 201])
    betas: list = field(default_factory=lambda: [0.0, 2.0, 5.0, 8.0])


@dataclass(frozen=True)
class BaselineConfig:
    enabled: bool = True
    context_frames: int = 100
    feature_stride: int = 10
    C: float = 1.0
    max_iter: int = 500


SECTIONS = {
    "paths": PathsConfig,
    "window": WindowConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "smoother": SmootherConfig,
    "baseline": BaselineConfig,
    "synth": SynthesisSpec,
}


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    synth: SynthesisSpec = field(default_factory=SynthesisSpec)
    seed: int = 0
    n_folds: int = 4
    test_fraction: float = 0.25

    @property
    def output_dir(self) -> str:
        return os.path.abspath(self.paths.output_dir)

    @property
    def data_root(self) -> str:
        if self.paths.data_root is None:
            return os.path.join(self.output_dir, "dataset")
        return os.path.abspath(self.paths.data_root)

    def window_spec(self) -> WindowSpec:
        return self.window.spec()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_dim=self.model.input_dim,
            hidden_dim=self.model.hidden_dim,
            embed_dim=self.model.embed_dim,
            cell=self.model.cell,
            attention=self.model.attention,
            max_tokens=self.window.max_tokens,
        )

    def to_dict(self) -> dict:
        raw = {}
        for name in SECTIONS:
            section = getattr(self, name)
            raw[name] = section.to_dict() if hasattr(section, "to_dict") else dataclasses.asdict(section)
        raw["seed"] = self.seed
        raw["n_folds"] = self.n_folds
        raw["test_fraction"] = self.test_fraction
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("Run config must be a JSON object.")
        unknown = set(raw) - set(SECTIONS) - {"seed", "n_folds", "test_fraction"}
        if unknown:
            raise ConfigError(f"Unknown run config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            if name in raw:
                kwargs[name] = _build_section(section_cls, raw[name], name)
        for name in ("seed", "n_folds", "test_fraction"):
            if name in raw:
                kwargs[name] = raw[name]
        try:
            config = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid run config: {e}") from e
        config.check()
        return config

    def check(self) -> None:
        """Cross-section consistency; raises ConfigError."""
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.n_folds < 1:
            raise ConfigError(f"n_folds must be at least 1, got {self.n_folds}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.synth.sample_rate_hz != self.window.sample_rate_hz:
            raise ConfigError("synth.sample_rate_hz must equal window.sample_rate_hz")
        try:
            self.synth.validate()
            self.model_config()
        except ValueError as e:
            raise ConfigError(f"Invalid run config: {e}") from e

    def with_overrides(self, seed=None, output_dir=None, n_folds=None) -> "RunConfig":
        config = self
        if seed is not None:
            config = dataclasses.replace(config, seed=int(seed))
        if output_dir is not None:
            paths = dataclasses.replace(config.paths, output_dir=output_dir)
            config = dataclasses.replace(config, paths=paths)
        if n_folds is not None:
            config = dataclasses.replace(config, n_folds=int(n_folds))
        config.check()
        return config

    def validate_paths(self, command: str) -> None:
        """Every path the command reads must exist."""
        if not os.path.exists(self.paths.manifest):
            raise ConfigError(f"Manifest '{self.paths.manifest}' does not exist")
        if command != "synth" and not os.path.isdir(self.data_root):
            raise ConfigError(f"Data root '{self.data_root}' does not exist, run synth first")


def _build_section(section_cls, raw, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"Config section '{name}' must be a JSON object")
    known = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"Unknown keys in config section '{name}': {sorted(unknown)}")
    try:
        return section_cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid config section '{name}': {e}") from e


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path: Optional[str]) -> RunConfig:
    """Load a config file; no path means the defaults."""
    if path is None:
        config = RunConfig()
        config.check()
        return config
    if not os.path.exists(path):
        LOGGER.error(f"Config file '{path}' does not exist")
        raise ConfigError(f"Config file '{path}' does not exist")
    with open(path, "r", encoding="utf-8") as config_file:
        try:
            raw = json.load(config_file)
        except json.JSONDecodeError as e:
            LOGGER.error(f"Config file '{path}' is not valid JSON: {e}")
            raise ConfigError(f"Config file '{path}' is not valid JSON: {e}") from e
    config = RunConfig.from_dict(raw)
    LOGGER.info(f"Loaded run config '{path}' (hash {config_hash(config)[:12]})")
    return config


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as config_file:
        json.dump(config.to_dict(), config_file, indent=2, sort_keys=True)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got '{raw}'") from None
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got '{raw}'")
    return workers
