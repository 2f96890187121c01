"""Experiment configuration: TOML parsing, validation and defaults.

Example::

    algorithm = "fed-sophia"
    rounds = 40
    seed = 0

    [data]
    source = "synthetic"
    per_class = 200

    [partition]
    devices = 8

    [optimizer]
    eta = 0.003
"""

import dataclasses
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .optimizers import SophiaConfig
from .telemetry import ChannelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ALGORITHMS = ("fed-sophia", "fedavg", "done")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    images: str = ""
    labels: str = ""
    # keep only the first ``limit`` samples of an IDX file; 0 keeps all
    limit: int = 0
    classes: int = 10
    per_class: int = 200
    dim: int = 784
    layout: str = "templates"
    spread: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"data.source must be 'synthetic' or 'idx', not {self.source!r}")
        if self.source == "idx" and not (self.images and self.labels):
            raise ValueError("idx data needs both 'images' and 'labels' paths")
        if self.limit < 0:
            raise ValueError("limit must be >= 0")
        if self.source == "synthetic":
            if self.classes < 2 or self.per_class < 1 or self.dim < 1:
                raise ValueError("synthetic data needs classes >= 2, per_class >= 1, dim >= 1")
            if self.layout not in ("axis", "templates"):
                raise ValueError(f"data.layout must be 'axis' or 'templates', not {self.layout!r}")
            if self.spread < 0:
                raise ValueError("spread must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (128,)

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in hidden):
            raise ValueError("hidden layer widths must be >= 1")
        object.__setattr__(self, "hidden", hidden)


@dataclass(frozen=True)
class PartitionConfig:
    devices: int = 32
    scheme: str = "label-shard"
    shards_per_device: int = 2
    train_fraction: float = 0.75

    def __post_init__(self):
        if self.devices < 1:
            raise ValueError("devices must be >= 1")
        if self.scheme not in ("iid", "label-shard"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.shards_per_device < 1:
            raise ValueError("shards_per_device must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")


@dataclass(frozen=True)
class DoneConfig:
    alpha: float = 0.05
    richardson_iters: int = 50
    # step applied to the approximate Newton direction
    eta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.richardson_iters < 1 or self.eta <= 0:
            raise ValueError("done needs alpha > 0, richardson_iters >= 1, eta > 0")


@dataclass(frozen=True)
class EnergyConfig:
    joules_per_flop: float = 1e-11
    # fixed per-iteration energy; 0 derives it from the model's FLOP count
    e_per_iter: float = 0.0
    carbon_kg_per_mj: float = 0.07

    def __post_init__(self):
        if self.joules_per_flop < 0 or self.e_per_iter < 0 or self.carbon_kg_per_mj < 0:
            raise ValueError("energy parameters must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "fed-sophia"
    rounds: int = 100
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    optimizer: SophiaConfig = field(default_factory=SophiaConfig)
    done: DoneConfig = field(default_factory=DoneConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {', '.join(ALGORITHMS)}, not {self.algorithm!r}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    def with_overrides(self, **dotted):
        """Return a copy with ``section.key`` (or top-level ``key``) values replaced."""
        raw = self.to_dict()
        for key, value in dotted.items():
            parts = key.split(".")
            target = raw
            for p in parts[:-1]:
                if p not in target or not isinstance(target[p], dict):
                    raise ConfigError(f"unknown config section {p!r} in {key!r}")
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        return from_dict(raw)


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "partition": PartitionConfig,
    "optimizer": SophiaConfig,
    "done": DoneConfig,
    "channel": ChannelConfig,
    "energy": EnergyConfig,
}
TOP_LEVEL = [f.name for f in fields(ExperimentConfig) if f.name not in SECTIONS]


def _coerce(value, default, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValueError(f"{name} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{name} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{name} must be a list")
        return tuple(value)
    return value


def _build(cls, values, prefix, locate):
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        if key not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown key {prefix}{key!r}", line=locate(prefix, key))
        try:
            kwargs[key] = _coerce(value, getattr(defaults, key), prefix + key)
        except ValueError as exc:
            raise ConfigError(str(exc), line=locate(prefix, key)) from None
    try:
        return cls(**kwargs)
    except ValueError as exc:
        # point at the offending key when the message names one
        named = [k for k in values if re.search(rf"\b{re.escape(k)}\b", str(exc))]
        line = locate(prefix, named[0]) if named else locate(prefix, None)
        raise ConfigError(f"[{prefix.rstrip('.') or 'top level'}] {exc}", line=line) from None


def _locator(text):
    """Map ``(section prefix, key)`` to the 1-based line defining it."""
    if not text:
        return lambda prefix, key: None
    index, section = {}, ""
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
        if m:
            section = m.group(1) + "."
            index.setdefault((section, None), n)
            continue
        m = re.match(r"^([A-Za-z0-9_.-]+)\s*=", s)
        if m:
            key = m.group(1)
            if "." in key and not section:
                head, key = key.rsplit(".", 1)
                index.setdefault((head + ".", key), n)
                index.setdefault((head + ".", None), n)
            else:
                index.setdefault((section, key), n)

    def locate(prefix, key):
        return index.get((prefix, key)) or index.get((prefix, None))

    return locate


def from_dict(raw, text=None, base_dir=None):
    locate = _locator(text)
    raw = dict(raw)
    sections = {}
    for name, cls in SECTIONS.items():
        values = raw.pop(name, {})
        if isinstance(values, cls):
            sections[name] = values
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{name!r} must be a table", line=locate("", name))
        values = dict(values)
        if name == "data" and base_dir is not None:
            for key in ("images", "labels"):
                if values.get(key) and not Path(values[key]).is_absolute():
                    values[key] = str(Path(base_dir) / values[key])
        sections[name] = _build(cls, values, name + ".", locate)
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown key {key!r}", line=locate("", key))
    defaults = ExperimentConfig()
    top = {}
    for key, value in raw.items():
        try:
            top[key] = _coerce(value, getattr(defaults, key), key)
        except ValueError as exc:
            raise ConfigError(str(exc), line=locate("", key)) from None
    try:
        cfg = ExperimentConfig(**top, **sections)
    except ValueError as exc:
        raise ConfigError(str(exc), line=locate("", "algorithm")) from None
    if cfg.data.source == "idx":
        for key in ("images", "labels"):
            path = Path(getattr(cfg.data, key))
            if not path.is_file():
                raise ConfigError(f"dataset file not found: {path}", line=locate("data.", key))
    return cfg


def loads(text, base_dir=None):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed config: {exc}", line=int(m.group(1)) if m else None) from None
    return from_dict(raw, text=text, base_dir=base_dir)


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        return loads(text, base_dir=path.parent)
    except ConfigError as exc:
        exc.path = str(path)
        raise
