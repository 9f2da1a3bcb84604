"""Versioned experiment configuration with strict key checking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .ssl.pretrain import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class DatasetSection:
    manifest: str | None = None
    out: str | None = None
    seed: int = 7
    n_objects: int = 8
    room_extent: tuple[float, float, float] = (6.0, 4.0, 2.5)
    n_object_classes: int = 6
    height: float = 1.2
    grid_step: float = 1.0
    yaw_step: float = 36.0
    pitch: float = 0.0


@dataclass
class PairingSection:
    iou_l: float = 0.3
    iou_h: float = 0.9
    epsilon_rel: float = 0.01
    downsample: int = 1


@dataclass
class RegionsSection:
    source: str = "graph"  # "graph" estimates regions, "labels" uses ground truth
    scale: float = 250.0
    sigma: float = 0.8
    min_size: int = 64
    mode: str = "blur"


@dataclass
class MatchingSection:
    tau_region: float = 0.5


@dataclass
class SamplingSection:
    strategy: str = "balanced-region"
    pairs_per_batch: int = 2048
    seed: int = 0
    max_retries: int = 10


@dataclass
class SuperviseSection:
    init: str = "pretrain"  # "pretrain", "random" or a checkpoint path
    fraction: float = 0.05
    eval_fraction: float | None = None
    gamma: float = 2.0
    mode: str = "full"
    iters: int = 1000
    base_lr: float = 0.03
    head_lr_mult: float = 10.0
    power: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    overlays: int = 0


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    dataset: DatasetSection = field(default_factory=DatasetSection)
    pairing: PairingSection = field(default_factory=PairingSection)
    regions: RegionsSection = field(default_factory=RegionsSection)
    matching: MatchingSection = field(default_factory=MatchingSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    ssl: TrainConfig = field(default_factory=lambda: TrainConfig(view_pairs_per_step=8))
    supervise: SuperviseSection = field(default_factory=SuperviseSection)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} not supported (expected {CONFIG_VERSION})")
        if self.regions.source not in ("graph", "labels"):
            raise ConfigError(f"regions.source must be 'graph' or 'labels', got {self.regions.source!r}")
        if not 0 <= self.pairing.iou_l < self.pairing.iou_h <= 1:
            raise ConfigError(f"pairing band [{self.pairing.iou_l}, {self.pairing.iou_h}] is not a valid interval")
        if not 0 < self.supervise.fraction < 1:
            raise ConfigError(f"supervise.fraction must lie in (0, 1), got {self.supervise.fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *names: str) -> str:
        blob = json.dumps({n: _plain(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        try:
            return _build(cls, data, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section.key=value`` overrides (``None`` values are skipped)."""
        data = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            section, name = key.split(".", 1) if "." in key else key.split("__", 1)
            if section not in data or name not in data[section]:
                raise ConfigError(f"unknown config key {section}.{name}")
            data[section][name] = value
        return ExperimentConfig.from_dict(data)


def _plain(obj):
    return asdict(obj) if is_dataclass(obj) else obj


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be an object")
            value = _build(sub, value, name)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "dataset": DatasetSection,
    "pairing": PairingSection,
    "regions": RegionsSection,
    "matching": MatchingSection,
    "sampling": SamplingSection,
    "ssl": TrainConfig,
    "supervise": SuperviseSection,
}
