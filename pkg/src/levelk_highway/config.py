"""Run configuration: defaults, flat INI-style config files, seed fan-out.

Every tunable of the pipeline lives here with a default matching the
published training setup where one exists (episode counts, learning rate,
discount, memory size, temperature schedule, car counts, road geometry,
bin edges, reward weights) and the documented fallback otherwise.  A single
seed fans out into named deterministic substreams so subsystems can be
re-run independently.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .actions import AccelerationModel
from .dqn import TrainConfig
from .env import EnvParams


class ConfigError(ValueError):
    pass


@dataclass
class IngestParams:
    frame_dt: float = 0.1          # NGSIM records at 10 Hz
    tick_seconds: float = 1.0      # decision period used for action labelling
    jump_threshold: float = 10.0   # m/s^2 implied by a bad velocity jump
    feet: bool = False
    road_length: float | None = None  # set for wrapped (simulator-generated) data
    col_vehicle_id: str = "Vehicle_ID"
    col_frame: str = "Frame_ID"
    col_y: str = "Local_Y"
    col_v: str = "v_Vel"
    col_lane: str = "Lane_ID"

    def columns(self) -> dict[str, str]:
        return {
            "vehicle_id": self.col_vehicle_id,
            "frame": self.col_frame,
            "y": self.col_y,
            "v": self.col_v,
            "lane": self.col_lane,
        }


@dataclass
class ValidateParams:
    n_limit: int = 3
    alpha: float = 0.05


@dataclass
class RunConfig:
    seed: int = 1
    jobs: int = 1
    max_level: int = 3
    eval_temperature: float = 1.0
    env: EnvParams = field(default_factory=EnvParams)
    actions: AccelerationModel = field(default_factory=AccelerationModel)
    train: TrainConfig = field(default_factory=TrainConfig)
    ingest: IngestParams = field(default_factory=IngestParams)
    validate: ValidateParams = field(default_factory=ValidateParams)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Render a config as the flat sectioned key-value file format."""
    parser = configparser.ConfigParser()
    parser["run"] = {
        "seed": str(cfg.seed),
        "jobs": str(cfg.jobs),
        "max_level": str(cfg.max_level),
        "eval_temperature": _format_value(cfg.eval_temperature),
    }
    for section, obj in (
        ("env", cfg.env),
        ("actions", cfg.actions),
        ("train", cfg.train),
        ("ingest", cfg.ingest),
        ("validate", cfg.validate),
    ):
        parser[section] = {
            f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)
        }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def _parse_schedule(raw: str) -> list[tuple[int, int]]:
    schedule = []
    for part in raw.split(","):
        after, _, count = part.partition(":")
        schedule.append((int(after), int(count)))
    if not schedule:
        raise ValueError("empty car schedule")
    return schedule


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if name == "car_schedule":
        return _parse_schedule(raw)
    if name == "hidden_sizes":
        return [int(v) for v in raw.split(",") if v.strip()]
    if name in ("t_decay", "road_length") and raw.lower() in ("none", "auto", ""):
        return None
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float) or default is None:
        return float(raw)
    return raw


def _line_of(path: str, section: str, key: str) -> int | None:
    try:
        with open(path) as fh:
            in_section = False
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if stripped.startswith("[") and stripped.endswith("]"):
                    in_section = stripped[1:-1] == section
                elif in_section and stripped.split("=")[0].strip() == key:
                    return lineno
    except OSError:
        pass
    return None


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional INI file, and overrides.

    Unknown sections or keys and unparseable values raise ConfigError with
    the offending location (line-numbered when it came from the file).
    """
    cfg = RunConfig()
    sections = {
        "run": cfg,
        "env": cfg.env,
        "actions": cfg.actions,
        "train": cfg.train,
        "ingest": cfg.ingest,
        "validate": cfg.validate,
    }
    run_keys = {"seed", "jobs", "max_level", "eval_temperature"}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            read = parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"{path}: unknown section [{section}]")
            target = sections[section]
            valid = run_keys if section == "run" else {f.name for f in fields(target)}
            for key, raw in parser.items(section):
                if key not in valid:
                    line = _line_of(path, section, key)
                    at = f"line {line}: " if line else ""
                    raise ConfigError(f"{path}: {at}unknown key {key!r} in [{section}]")
                default = getattr(target, key)
                try:
                    setattr(target, key, _coerce(key, raw, default))
                except ValueError as exc:
                    line = _line_of(path, section, key)
                    at = f"line {line}: " if line else ""
                    raise ConfigError(f"{path}: {at}bad value for {key!r}: {exc}") from exc
    for key, value in (overrides or {}).items():
        section, _, name = key.partition(".")
        if section not in sections:
            raise ConfigError(f"unknown section {section!r}")
        setattr(sections[section], name, value)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def substream(seed: int, *labels: str | int) -> np.random.Generator:
    """Deterministic named child stream of the run seed."""
    entropy = [seed & 0xFFFFFFFF] + [
        zlib.crc32(str(lbl).encode()) for lbl in labels
    ]
    return np.random.default_rng(np.random.SeedSequence(entropy))
