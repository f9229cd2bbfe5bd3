"""Experiment configuration: INI-style sections with typed keys.

The canonical text (sections and keys sorted, values in a fixed format) is
what gets hashed into the 32-byte config fingerprint.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
import re
import typing
from dataclasses import dataclass, field

from .augment import AugmentPolicy
from .bags import Assumption, GeneratorConfig
from .errors import ConfigError
from .losses import LossConfig


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "default"
    method: str = "simmil"            # simmil | simmil_survival | contrastive | random
    task: str = "classification"      # classification | subtyping | survival
    seed: int = 17


@dataclass(frozen=True)
class DataSection:
    assumption: str = "standard"
    num_classes: int = 9
    positive_classes: tuple[int, ...] = (0,)
    bag_size: int = 50
    train_bags: int = 500
    test_bags: int = 140
    positive_bag_fraction: float = 0.5
    pos_ratio_min: float = 0.05
    pos_ratio_max: float = 0.2
    resolution: int = 32
    channels: int = 3
    nuisance: float = 1.0
    risk_weights: tuple[float, ...] = (1.0, 0.5)
    risk_ratio_max: float = 0.5
    time_scale: float = 10.0
    risk_slope: float = 0.2
    time_noise: float = 0.1
    censor_rate: float = 0.2


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    output_size: int = 32
    scale_min: float = 0.2
    scale_max: float = 1.0
    ratio_min: float = 0.75
    ratio_max: float = 4 / 3
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    sigma_min: float = 0.1
    sigma_max: float = 2.0
    hflip_p: float = 0.5


@dataclass(frozen=True)
class ModelSection:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    head_hidden: int = 128
    proj_dim: int = 64


@dataclass(frozen=True)
class LossSection:
    kind: str = "sce"
    alpha: float = 1.0
    beta: float = 1.0
    A: float = -4.0
    bins: int = 4
    temperature: float = 0.5


@dataclass(frozen=True)
class OptimSection:
    kind: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "step"
    milestones: tuple[int, ...] = (60, 80)
    gamma: float = 0.1


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 20
    instances_per_epoch: int = 0
    parent: str = ""


@dataclass(frozen=True)
class DownstreamSection:
    aggregator: str = "max"
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 1
    schedule: str = "cosine"
    train_fraction: float = 0.8


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "augment": AugmentSection,
    "model": ModelSection,
    "loss": LossSection,
    "optim": OptimSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "downstream": DownstreamSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)

    def with_values(self, **sections) -> "ExperimentConfig":
        """``cfg.with_values(train={"epochs": 5})`` returns an updated copy."""
        updates = {}
        for name, values in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            try:
                updates[name] = dataclasses.replace(getattr(self, name), **values)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        return dataclasses.replace(self, **updates)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def canonical(self) -> str:
        return to_text(self)

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()

    # typed views ---------------------------------------------------------
    def policy(self) -> AugmentPolicy:
        values = dataclasses.asdict(self.augment)
        values.pop("enabled")
        return AugmentPolicy(**values)

    def loss_config(self) -> LossConfig:
        return LossConfig(**dataclasses.asdict(self.loss))

    def generator(self, split: str = "train") -> GeneratorConfig:
        d = self.data
        n = d.train_bags if split == "train" else d.test_bags
        return GeneratorConfig(
            assumption=Assumption(d.assumption), num_classes=d.num_classes,
            positive_classes=d.positive_classes, bag_size=d.bag_size, num_bags=n,
            positive_bag_fraction=d.positive_bag_fraction, pos_ratio_min=d.pos_ratio_min,
            pos_ratio_max=d.pos_ratio_max, resolution=d.resolution, channels=d.channels,
            nuisance=d.nuisance, risk_weights=d.risk_weights, risk_ratio_max=d.risk_ratio_max,
            time_scale=d.time_scale, risk_slope=d.risk_slope, time_noise=d.time_noise,
            censor_rate=d.censor_rate, id_prefix=f"{split}-")


# -- text round trip ---------------------------------------------------------
def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        origin = typing.get_origin(typ)
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(_parse(p, inner, where) for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for name in sorted(SECTIONS):
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for key in sorted(f.name for f in dataclasses.fields(section)):
            lines.append(f"{key} = {_format(getattr(section, key))}")
        lines.append("")
    return "\n".join(lines)


def _line_of(text: str, section: str | None, key: str | None = None) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return no
    return None


def from_text(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = base or ExperimentConfig()
    updates = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, name)}: unknown section [{name}]")
        cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        values = {}
        for key, raw in parser.items(name):
            line = _line_of(text, name, key)
            where = f"{source}:{line}: [{name}] {key}"
            if key not in hints:
                raise ConfigError(f"{where}: unknown key")
            values[key] = _parse(raw, hints[key], where)
        updates[name] = values
    return cfg.with_values(**updates)


def load(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return from_text(text, base, source=str(path))


def worker_count() -> int:
    """Worker cap from ``SIMMIL_THREADS`` (default: hardware count)."""
    raw = os.environ.get("SIMMIL_THREADS", "")
    try:
        return max(1, int(raw)) if raw else max(1, os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"SIMMIL_THREADS must be an integer, got {raw!r}") from None


# -- presets -------------------------------------------------------------------
def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _desk() -> ExperimentConfig:
    """Shipped desk-scale recipe: 500/140 bags of 50, seed 17, a few minutes on CPU."""
    return ExperimentConfig().with_values(
        experiment={"name": "desk"},
        optim={"lr": 1e-2},
        schedule={"milestones": (6, 8)},
        train={"epochs": 10, "instances_per_epoch": 4096},
    )


def _prelim4() -> ExperimentConfig:
    """Four texture classes, one of them positive: instance vs bag-level contrast."""
    return _desk().with_values(
        experiment={"name": "prelim4"},
        data={"num_classes": 4, "positive_classes": (0,)},
        optim={"lr": 2e-2},
    )


def _survival_toy() -> ExperimentConfig:
    """Accumulative risk with a monotone risk-to-time link; ranking-loss pretraining."""
    return _desk().with_values(
        experiment={"name": "survival_toy", "method": "simmil_survival", "task": "survival"},
        data={"assumption": "accumulative", "positive_classes": (0, 1)},
        loss={"kind": "ranking"},
        optim={"lr": 1e-1},
        schedule={"kind": "cosine"},
        downstream={"aggregator": "abmil"},
    )


def _full_binary() -> ExperimentConfig:
    """Full-length binary recipe: 200 epochs, decay at 120 and 160, batch 256, SCE."""
    return ExperimentConfig().with_values(
        experiment={"name": "full_binary"},
        optim={"lr": 1e-3, "batch_size": 256},
        schedule={"kind": "step", "milestones": (120, 160)},
        loss={"kind": "sce"},
        train={"epochs": 200},
    )


def _full_subtyping() -> ExperimentConfig:
    """Full-length subtyping recipe: 100 epochs, decay at 60 and 80, CE."""
    return ExperimentConfig().with_values(
        experiment={"name": "full_subtyping", "task": "subtyping"},
        data={"assumption": "mutually_exclusive", "positive_classes": (0, 4)},
        optim={"lr": 1e-3, "batch_size": 256},
        schedule={"kind": "step", "milestones": (60, 80)},
        loss={"kind": "ce"},
        train={"epochs": 100},
    )


def _full_survival() -> ExperimentConfig:
    """Full-length survival recipe: ranking loss, cosine decay over 100 epochs."""
    return _survival_toy().with_values(
        experiment={"name": "full_survival"},
        optim={"lr": 1e-3, "batch_size": 256},
        schedule={"kind": "cosine"},
        train={"epochs": 100, "instances_per_epoch": 0},
        downstream={"aggregator": "abmil", "lr": 1e-4},
    )


def _wide() -> ExperimentConfig:
    """Desk recipe with every extractor width doubled."""
    return _desk().with_values(experiment={"name": "wide"}, model={"widths": (32, 64, 128, 256)})


def _continue() -> ExperimentConfig:
    """Continuation from an existing checkpoint: cosine schedule at half the rate."""
    return _desk().with_values(
        experiment={"name": "continue"},
        optim={"lr": 5e-3},
        schedule={"kind": "cosine"},
    )


PRESETS: dict[str, typing.Callable[[], ExperimentConfig]] = {
    "desk": _desk,
    "prelim4": _prelim4,
    "survival_toy": _survival_toy,
    "continue": _continue,
    "wide": _wide,
    "full_binary": _full_binary,
    "full_subtyping": _full_subtyping,
    "full_survival": _full_survival,
}
