"""Run configuration: JSON file plus CLI overrides, strictly validated.

Unknown keys are rejected at every level so a typo in a weight name cannot
silently disable a regularizer. Every run writes the fully merged settings
to config.resolved.json; re-running from that file reproduces the outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .forward_model import ModelConstants
from .objective import LossMode, RegWeights
from .optimizer import FitConfig, RpropOptions
from .phantom import PhantomSpec


@dataclass
class FitSection:
    n_fibers: int = 2
    mode: str = "mse"
    iterations: int = 300
    slab_size: int = 30
    slab_overlap: int = 5
    seed: int = 0
    calibration_enabled: bool = True
    normalize: bool = True
    repulsion_only: bool = False
    optimizer: str = "rprop"
    adam_lr: float = 0.05


@dataclass
class MetricsSection:
    f_detect: float = 0.05
    angle_tol_deg: float = 25.0
    merge_deg: float = 5.0


@dataclass
class PhantomSection:
    angles_deg: list = field(default_factory=lambda: list(range(15, 91, 5)))
    voxels_per_angle: int = 200
    include_single_fiber: bool = True
    snr: float = 30.0
    eigenvalues: list = field(default_factory=lambda: [1.7e-3, 0.3e-3, 0.3e-3])
    seed: int = 0
    sigma_g: float = 0.0
    shells: list = field(default_factory=lambda: [1000.0, 2000.0, 3000.0])
    dirs_per_shell: int = 64
    n_b0: int = 1


@dataclass
class RunConfig:
    fit: FitSection = field(default_factory=FitSection)
    weights: RegWeights = field(default_factory=RegWeights)
    constants: ModelConstants = field(default_factory=ModelConstants)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    rprop: RpropOptions = field(default_factory=RpropOptions)
    threads: int | None = None

    def fit_config(self) -> FitConfig:
        try:
            mode = LossMode(self.fit.mode)
        except ValueError:
            raise ConfigError(f"fit.mode must be 'mse' or 'nll', got {self.fit.mode!r}") from None
        weights = self.weights.repulsion_only() if self.fit.repulsion_only else self.weights
        cfg = FitConfig(
            n_fibers=self.fit.n_fibers,
            mode=mode,
            weights=weights,
            constants=self.constants,
            iterations=self.fit.iterations,
            slab_size=self.fit.slab_size,
            slab_overlap=self.fit.slab_overlap,
            seed=self.fit.seed,
            calibration_enabled=self.fit.calibration_enabled,
            rprop=self.rprop,
            optimizer=self.fit.optimizer,
            adam_lr=self.fit.adam_lr,
        )
        try:
            return cfg.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def phantom_spec(self) -> PhantomSpec:
        spec = PhantomSpec(
            angles_deg=tuple(self.phantom.angles_deg),
            voxels_per_angle=self.phantom.voxels_per_angle,
            include_single_fiber=self.phantom.include_single_fiber,
            snr=self.phantom.snr,
            eigenvalues=tuple(self.phantom.eigenvalues),
            seed=self.phantom.seed,
        )
        try:
            return spec.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "fit": FitSection,
    "weights": RegWeights,
    "constants": ModelConstants,
    "phantom": PhantomSection,
    "metrics": MetricsSection,
    "rprop": RpropOptions,
}


def _build_section(cls, data: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}.{key!r}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad value in section {path!r}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = RunConfig()
    for key, value in data.items():
        if key == "threads":
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError("threads must be a positive integer or null")
            cfg.threads = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a JSON object")
            setattr(cfg, key, _build_section(_SECTIONS[key], value, key))
        else:
            raise ConfigError(f"unknown key {key!r}")
    # cross-field validation happens on use
    try:
        cfg.weights.validate()
        cfg.constants.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    return config_from_dict(data)


def save_resolved(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(cfg.resolved(), f, indent=1, sort_keys=True)
