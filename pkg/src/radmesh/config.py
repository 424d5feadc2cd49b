"""Pipeline configuration: one YAML file with a section per stage, strict keys, dotted overrides."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

import yaml

from .extract import ExtractConfig
from .refine import Stage2Config
from .volrender import Stage1Config


class ConfigError(ValueError):
    """Unknown key, bad value or unparsable config file."""


@dataclass
class SceneConfig:
    """Analytic scene and camera rig used by ``synth`` and by the Chamfer oracle."""

    shape: str = "sphere"
    size: tuple = (0.6,)
    gloss: float = 0.0
    n_views: int = 20
    n_test: int = 4
    resolution: int = 64
    radius: float = 3.0
    fov_deg: float = 40.0
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(float(s) for s in self.size)
        if self.n_views < 1 or self.resolution < 1:
            raise ValueError("n_views and resolution must be positive")

    @property
    def fov_x(self) -> float:
        return math.radians(self.fov_deg)


@dataclass
class BakeConfig:
    resolution: int = 1024
    dilate_rounds: int = 1
    cascade_levels: int = 1
    quantize: bool = True

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("bake resolution must be >= 8")
        if self.cascade_levels < 1:
            raise ValueError("cascade_levels must be >= 1")


@dataclass
class EvalConfig:
    n_points: int = 50_000
    seed: int = 0


@dataclass
class PipelineConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    bake: BakeConfig = field(default_factory=BakeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.set_seed(self.seed)

    def set_seed(self, seed: int) -> "PipelineConfig":
        """Propagate one seed to every stage that draws random numbers."""
        self.seed = int(seed)
        for section in (self.scene, self.stage1, self.stage2, self.eval):
            section.seed = self.seed
        return self

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for f in fields(self):
            if f.name != "seed":
                out[f.name] = _plain(dataclasses.asdict(getattr(self, f.name)))
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {f.name: f for f in fields(PipelineConfig) if f.name != "seed"}


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot ("1e-3") as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in values.items()}
    try:
        return cls(**{**{f.name: getattr(defaults, f.name) for f in fields(cls)}, **kwargs})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(data: dict | None) -> PipelineConfig:
    """Strict construction: every key must name a known section or field."""
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build_section(f.default_factory, data.get(name, {}) or {}, name)
                for name, f in _SECTIONS.items()}
    seed = _coerce(data.get("seed", 0), 0, "seed")
    cfg = PipelineConfig(seed=seed, **sections)
    # explicit per-section seeds win over the global one
    for name, values in data.items():
        if isinstance(values, dict) and "seed" in values:
            getattr(cfg, name).seed = _coerce(values["seed"], 0, f"{name}.seed")
    return cfg


def parse_override(text: str):
    """``section.key=value`` with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (data or {}).items()}
    for text in overrides or ():
        path, value = parse_override(text)
        if len(path) == 1:
            data[path[0]] = value
        elif len(path) == 2:
            data.setdefault(path[0], {})
            if not isinstance(data[path[0]], dict):
                raise ConfigError(f"override {text!r}: {path[0]!r} is not a section")
            data[path[0]][path[1]] = value
        else:
            raise ConfigError(f"override {text!r}: expected at most one dot")
    return data


def read_yaml(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


DESK = {
    "scene": {"shape": "sphere", "n_views": 20, "n_test": 4, "resolution": 64},
    "stage1": {"steps": 5000, "rays_per_step": 256, "n_candidates": 96, "max_samples": 48,
               "max_res": 64, "occupancy_res": 32, "w_entropy": 1e-3, "log_every": 500},
    "extract": {"resolution": 48},
    "stage2": {"steps": 2000, "log_every": 200},
    "bake": {"resolution": 512},
    "eval": {"n_points": 50_000},
}
PRESETS = {"default": {}, "desk": DESK}


def load_config(path=None, overrides=(), seed: int | None = None, preset: str = "default") -> PipelineConfig:
    """Preset, then file, then dotted overrides, then ``seed``; later sources win."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    data = apply_overrides(PRESETS[preset], [])
    if path is not None:
        for key, value in read_yaml(path).items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
    cfg = config_from_dict(apply_overrides(data, overrides))
    if seed is not None:
        cfg.set_seed(seed)
    return cfg
