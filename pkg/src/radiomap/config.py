"""Run configuration: typed sections loaded from an INI-style file.

Unknown sections or keys are rejected. Every value can be overridden from
the command line with ``section.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .actgan import GeneratorConfig, LossWeights
from .simdata import SimParams, parse_setting


class ConfigFileError(ValueError):
    """Config file or override is invalid."""


@dataclass
class DatasetSection:
    source: str = "synthetic"  # synthetic | ingest
    path: str = ""
    regions: int = 200
    tx_per_region: int = 4
    size: int = 64
    seed: int = 0


@dataclass
class SplitSection:
    seed: int = 0
    train: int = 500
    val: int = 100
    test: int = 100


@dataclass
class ModelSection:
    scale: str = "desk"  # desk | full
    seed: int = 0


@dataclass
class LossSection:
    mse: float = 1.0
    per: float = 0.1
    sty: float = 250.0
    adv: float = 0.01


@dataclass
class ScheduleSection:
    epochs: int = 100
    lr: float = 1e-4
    lr_decay_epoch: int = 50
    lr_decay_factor: float = 0.1
    batch_size: int = 4
    max_batches: int = 0  # 0 = full epoch


@dataclass
class ScenarioSection:
    scenario: int = 1
    threshold: float = 0.2
    setting: str = "a"
    omega: int = 100
    sigma: float = 0.0


@dataclass
class EvaluateSection:
    thresholds: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2])
    settings: list[str] = field(default_factory=lambda: ["a", "b", "c"])
    rates: list[float] = field(default_factory=lambda: [0.04, 0.07, 0.10])
    omegas: list[int] = field(default_factory=lambda: [20, 50, 100, 150])
    sigmas: list[float] = field(default_factory=lambda: [0.0])
    baselines: list[str] = field(default_factory=lambda: ["idw", "rbf", "kriging"])
    emit_maps: int = 4
    split: str = "test"
    max_maps: int = 0  # 0 = whole split


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    sim: SimParams = field(default_factory=SimParams)
    output: str = "runs/default"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.dataset.source not in ("synthetic", "ingest"):
            raise ConfigFileError(f"dataset.source must be synthetic or ingest, got {self.dataset.source!r}")
        if self.dataset.source == "ingest" and not self.dataset.path:
            raise ConfigFileError("dataset.path is required when dataset.source = ingest")
        if self.scenario.scenario not in (1, 2, 3):
            raise ConfigFileError(f"scenario must be 1, 2 or 3, got {self.scenario.scenario}")
        if not 0 <= self.scenario.threshold < 1:
            raise ConfigFileError("scenario.threshold must lie in [0, 1)")
        if self.model.scale not in ("desk", "full"):
            raise ConfigFileError(f"model.scale must be desk or full, got {self.model.scale!r}")
        if self.scenario.scenario == 2:
            parse_setting(self.scenario.setting)
        if self.schedule.batch_size < 1 or self.schedule.epochs < 0:
            raise ConfigFileError("schedule.batch_size must be >= 1 and epochs >= 0")
        return self

    @property
    def input_channels(self) -> int:
        return 2 if self.scenario.scenario == 1 else 3

    def generator_config(self) -> GeneratorConfig:
        seed = self.model.seed
        if self.model.scale == "full":
            gc = GeneratorConfig.full(self.input_channels, seed)
        else:
            gc = GeneratorConfig.desk(self.input_channels, seed)
        if self.dataset.size != gc.base_resolution:
            gc = dataclasses.replace(gc, base_resolution=self.dataset.size)
        return gc

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.mse, self.loss.per, self.loss.sty, self.loss.adv)

    def model_identity(self) -> dict:
        """The part of the config a checkpoint must agree with."""
        return {
            "generator": self.generator_config().to_dict(),
            "scenario": self.scenario.scenario,
            "threshold": self.scenario.threshold,
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TOP_LEVEL = {"output", "seed"}


def _convert(value: str, tp):
    origin = typing.get_origin(tp)
    try:
        if origin is list:
            (inner,) = typing.get_args(tp)
            items = [v.strip() for v in value.split(",") if v.strip()]
            return [_convert(v, inner) for v in items]
        if tp is bool:
            return value.strip().lower() in ("1", "true", "yes", "on")
        if tp in (int, float, str):
            return tp(value.strip())
    except ValueError as exc:
        raise ConfigFileError(f"cannot parse {value!r} as {tp}: {exc}") from None
    raise ConfigFileError(f"unsupported config type {tp}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _set(cfg: RunConfig, section: str, key: str, value: str) -> None:
    if section in ("", "run"):
        if key not in _TOP_LEVEL:
            raise ConfigFileError(f"unknown key {key!r} in [run]")
        setattr(cfg, key, _convert(value, _field_types(RunConfig)[key]))
        return
    if section not in _SECTIONS or section in _TOP_LEVEL:
        raise ConfigFileError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    types = _field_types(type(obj))
    if key not in types:
        raise ConfigFileError(f"unknown key {key!r} in [{section}]")
    new = _convert(value, types[key])
    if dataclasses.is_dataclass(obj) and getattr(type(obj), "__dataclass_params__").frozen:
        setattr(cfg, section, dataclasses.replace(obj, **{key: new}))
    else:
        setattr(obj, key, new)


def load_config(path=None, overrides: typing.Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigFileError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                _set(cfg, section, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigFileError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, _, key = lhs.strip().rpartition(".")
        _set(cfg, section, key, value)
    return cfg.validate()


def dump_config(cfg: RunConfig, path) -> Path:
    """Write ``cfg`` back out in the same INI layout it is read from."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {k: str(getattr(cfg, k)) for k in sorted(_TOP_LEVEL)}
    for name in _SECTIONS:
        if name in _TOP_LEVEL:
            continue
        obj = getattr(cfg, name)
        parser[name] = {
            f.name: ",".join(map(str, v)) if isinstance(v := getattr(obj, f.name), list) else str(v)
            for f in dataclasses.fields(obj)
        }
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)
    return path
