"""Run configuration files (JSON, strict)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .mle import TomographyOptions
from .physim import AcquisitionConfig, SourceConfig
from .rng import MAX_SEED

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    n_frames: int = 49455
    seed: int = 0
    tomography: TomographyOptions = field(default_factory=TomographyOptions)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "n_frames": self.n_frames,
            "source": dataclasses.asdict(self.source),
            "acquisition": dataclasses.asdict(self.acquisition),
            "tomography": self.tomography.to_dict(),
            "paths": dict(self.paths),
        }

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


PATH_KEYS = {"frames", "analysis_dir", "tomo_dir"}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown field")
    kwargs = {}
    for key, value in data.items():
        default = names[key].default
        if isinstance(default, bool) or value is None:
            raise ConfigError(f"{where}.{key}: invalid value {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}.{key}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}.{key}: expected a string, got {value!r}")
        elif isinstance(default, tuple):
            if not isinstance(value, list) or len(value) != len(default):
                raise ConfigError(f"{where}.{key}: expected a list of {len(default)} numbers")
            value = tuple(float(v) for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    allowed = {"version", "seed", "n_frames", "source", "acquisition", "tomography", "paths"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"config.{key}: unknown field")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config.version: expected {CONFIG_VERSION}, got {data.get('version')!r}")
    if "seed" not in data:
        raise ConfigError("config.seed: missing (wall-clock seeding is not supported)")
    seed = data["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= MAX_SEED:
        raise ConfigError(f"config.seed: expected a 64-bit unsigned integer, got {seed!r}")
    n_frames = data.get("n_frames", 49455)
    if not isinstance(n_frames, int) or isinstance(n_frames, bool) or n_frames < 1:
        raise ConfigError(f"config.n_frames: expected a positive integer, got {n_frames!r}")
    paths = data.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("config.paths: expected an object")
    for key, value in paths.items():
        if key not in PATH_KEYS:
            raise ConfigError(f"config.paths.{key}: unknown field")
        if not isinstance(value, str):
            raise ConfigError(f"config.paths.{key}: expected a string")
    return RunConfig(
        source=_build(SourceConfig, data.get("source", {}), "config.source"),
        acquisition=_build(AcquisitionConfig, data.get("acquisition", {}), "config.acquisition"),
        n_frames=n_frames,
        seed=seed,
        tomography=_build(TomographyOptions, data.get("tomography", {}), "config.tomography"),
        paths=paths,
    )


def parse_json(text: str, name: str = "<config>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        return config_from_dict(parse_json(text, str(path)))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def bundled(name: str) -> Path:
    """Path of a config or expectation file shipped with the package."""
    if not name.endswith(".json"):
        name += ".json"
    return Path(str(resources.files("pulsecw") / "data" / name))
