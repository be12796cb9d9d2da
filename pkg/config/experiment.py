"""
Experiment configuration: one YAML file with a section per module.

Values are resolved in increasing precedence: model defaults, the YAML file,
``IMPUTAD_<SECTION>__<FIELD>`` environment variables, then explicit overrides
(CLI flags). ``IMPUTAD_EXPERIMENT__<FIELD>`` addresses top-level fields.
"""
import logging
import os
from typing import Any, Dict, List, Mapping, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config.config import ENV_PREFIX
from imputad.denoiser import DenoiserConfig
from imputad.detector import VARIANTS, EnsembleConfig
from imputad.diffusion import NoiseSchedule, build_schedule
from imputad.errors import ConfigError
from imputad.masking import MaskingConfig
from imputad.trainer import TrainConfig

logger = logging.getLogger(__name__)

TOP_LEVEL_SECTION = "experiment"
DEFAULT_SEEDS = [0, 1, 2, 3, 4, 5]


class DatasetSection(BaseModel):
    path: str = Field("data/synthetic", description="Dataset directory holding train/test/test_label")
    window: int = Field(100, ge=2, description="Detection window length")
    train_stride: Optional[int] = Field(None, ge=1, description="Stride between training windows (default: window)")


class ScheduleSection(BaseModel):
    T: int = Field(50, ge=1)
    beta_min: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_max: float = Field(0.5, gt=0.0, lt=1.0)
    shape: str = Field("quadratic", description="quadratic or linear")

    @model_validator(mode="after")
    def _ordered(self):
        if self.beta_min > self.beta_max:
            raise ValueError(f"beta_min={self.beta_min} exceeds beta_max={self.beta_max}")
        return self

    def build(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_min, self.beta_max, self.shape)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "imputad"
    mode: str = Field("imputation", description="Ablation variant the commands run")
    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS), min_length=1)
    out_dir: str = "runs"
    workers: int = Field(1, ge=1, description="Threads running inference window batches")
    inference_batch_size: int = Field(16, ge=1)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    masking: MaskingConfig = Field(default_factory=MaskingConfig)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)

    @model_validator(mode="after")
    def _consistent(self):
        if self.mode not in VARIANTS:
            raise ValueError(f"unknown mode '{self.mode}', expected one of {list(VARIANTS)}")
        if self.denoiser.T != self.schedule.T:
            raise ValueError(f"denoiser.T={self.denoiser.T} differs from schedule.T={self.schedule.T}")
        outside = [t for t in self.ensemble.vote_steps if t > self.schedule.T]
        if outside:
            raise ValueError(f"vote steps {outside} exceed schedule.T={self.schedule.T}")
        # the masking section is authoritative for training
        if self.train.mask_policy != self.masking:
            self.train = self.train.model_copy(update={"mask_policy": self.masking})
        return self

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def for_variant(self, mode: Optional[str] = None) -> "ExperimentConfig":
        """Copy with masking, reference mode and attention switches set for ablation ``mode``."""
        mode = mode or self.mode
        if mode not in VARIANTS:
            raise ConfigError(f"unknown mode '{mode}', expected one of {list(VARIANTS)}")
        spec = VARIANTS[mode]
        data = self.model_dump()
        data["mode"] = mode
        data["masking"]["strategy"] = spec.mask_strategy
        data["train"]["reference_mode"] = spec.reference_mode
        data["denoiser"]["use_temporal"] = spec.use_temporal
        data["denoiser"]["use_spatial"] = spec.use_spatial
        return _validate(data)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        data = self.model_dump()
        data["train"]["seed"] = int(seed)
        return _validate(data)


def _validate(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc


def _set_path(data: Dict[str, Any], path: List[str], value: Any):
    node = data
    for key in path[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[path[-1]] = value


def env_overrides(environ: Mapping[str, str]) -> Dict[str, Any]:
    """Nested overrides from ``IMPUTAD_<SECTION>__<FIELD>[__<SUBFIELD>]`` variables, values parsed as YAML scalars."""
    overrides: Dict[str, Any] = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        path = [part.lower() for part in key[len(ENV_PREFIX):].split("__")]
        if path[0] == TOP_LEVEL_SECTION:
            path = path[1:]
        if path and all(path):
            _set_path(overrides, path, yaml.safe_load(raw))
    return overrides


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def load_config(
    path: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Resolve an experiment config.

    Args:
        path: YAML file; None uses the defaults alone.
        environ: Environment to read overrides from (default ``os.environ``).
        overrides: Nested dict applied last, e.g. ``{"train": {"epochs": 5}}``.
    """
    data: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        try:
            with open(path, "r", encoding="utf-8") as handle:
                loaded = yaml.safe_load(handle)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping, got {type(loaded).__name__}")
        data = loaded or {}
    _merge(data, env_overrides(os.environ if environ is None else environ))
    _merge(data, overrides or {})
    cfg = _validate(data)
    logger.debug("Experiment config resolved", extra={'event_type': 'config_loaded', 'path': path, 'mode': cfg.mode})
    return cfg


def dump_config(cfg: ExperimentConfig, path: Optional[str] = None) -> str:
    """Serialize to YAML (field order preserved); optionally write it to ``path``."""
    text = yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
    return text
