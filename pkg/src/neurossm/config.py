"""Experiment configuration: YAML file, dotted overrides, stage hashes."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DatasetSpec
from .model import LARGE, SMALL, NetworkConfig
from .quant import QuantSpec
from .sim.cost import CALIBRATED
from .sim.simulator import InjectionSchedule, StepCostModel
from .train import TrainConfig

PRESETS = {"small": SMALL, "large": LARGE}
STAGE_SECTIONS = {
    "train": ("seed", "dataset", "model", "train"),
    "ptq": ("seed", "dataset", "model", "train", "quant", "calib_size"),
    "qaft": ("seed", "dataset", "model", "train", "quant", "calib_size", "qaft"),
}


class ConfigError(ValueError):
    pass


def _default_qaft() -> TrainConfig:
    return TrainConfig(epochs=1, learning_rate=1e-4, batch_size=50)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: NetworkConfig = SMALL
    train: TrainConfig = field(default_factory=TrainConfig)
    qaft: TrainConfig = field(default_factory=_default_qaft)
    quant: QuantSpec = field(default_factory=QuantSpec)
    cost: StepCostModel = CALIBRATED
    schedule: str = "pipelined"
    period: int | None = None  # overrides the schedule's period when set
    seed: int = 0
    calib_size: int = 256
    bench_samples: int = 10
    eval_stream_samples: int = 1000
    output_dir: str = "runs/default"
    data_dir: str | None = None
    strict_counts: bool = True  # insist on the standard 60k/10k (50k/10k) record counts

    def __post_init__(self):
        if self.model.input_dim != self.dataset.input_dim or self.model.seq_len != self.dataset.seq_len:
            raise ConfigError(f"model (I={self.model.input_dim}, L={self.model.seq_len}) does not match dataset "
                              f"{self.dataset.name} (I={self.dataset.input_dim}, L={self.dataset.seq_len})")
        if self.schedule not in ("pipelined", "fall_through"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.period is not None and self.period < 1:
            raise ConfigError("period must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def schedule_for(self, depth: int) -> InjectionSchedule:
        if self.period is not None:
            return InjectionSchedule("custom", self.period)
        return InjectionSchedule.pipelined() if self.schedule == "pipelined" else InjectionSchedule.fall_through(depth)

    def stage_hash(self, stage: str) -> str:
        d = self.to_dict()
        return config_hash({k: d[k] for k in STAGE_SECTIONS[stage]})


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _build(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _parse_scalar(text: str):
    v = yaml.safe_load(text)
    if isinstance(v, str):
        try:  # YAML 1.1 reads "1e9" as a string
            return float(v)
        except ValueError:
            pass
    return v


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    cur[parts[-1]] = value


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    sections = {}
    model = dict(raw.pop("model", {}) or {})
    preset = model.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}")
        model = {**PRESETS[preset].to_dict(), **model}
    elif model:
        model = {**SMALL.to_dict(), **model}
    if model:
        sections["model"] = _build(NetworkConfig, model, "model")
    for name, cls in (("dataset", DatasetSpec), ("train", TrainConfig), ("qaft", TrainConfig),
                      ("quant", QuantSpec), ("cost", StepCostModel)):
        if name in raw:
            sections[name] = _build(cls, dict(raw.pop(name) or {}), name)
    if "model" not in sections and sections.get("dataset") is not None and sections["dataset"].name == "scifar":
        sections["model"] = LARGE
    return _build(ExperimentConfig, {**raw, **sections}, "config")


def bundled_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__package__).joinpath("configs").iterdir()
                  if p.name.endswith(".yaml"))


def _config_text(path) -> str:
    """Read a config file; a bare name like ``smnist_desk`` selects a bundled one."""
    p = Path(path)
    if not p.exists() and str(path) in bundled_configs():
        return resources.files(__package__).joinpath("configs", f"{path}.yaml").read_text()
    return p.read_text()


def load_config(path=None, overrides: list[str] = ()) -> ExperimentConfig:
    """Defaults < file < ``key=value`` overrides (dotted keys, YAML-typed values)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(_config_text(path)) or {}
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_dotted(raw, k.strip(), _parse_scalar(v))
    return from_dict(raw)
