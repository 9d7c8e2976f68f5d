"""Run configuration: YAML file + ``--section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig
from .errors import ConfigError, InvalidInputError
from .sampler import SampleConfig
from .trainer import TrainConfig


@dataclass
class DataSection:
    n_train: int = 64
    n_valid: int = 16
    accel: int = 4
    coil_mode: str = "single"
    height: int = 64
    width: int = 64
    seed: int = 7
    valid_seed_offset: int = 100_000
    acs_lines: int | None = None
    pad_to: list[int] | None = None
    resize_to: list[int] | None = None
    with_phase: bool = False
    n_ellipses: int = 6


@dataclass
class DenoiserSection:
    base_channels: int = 16
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 1, 2])
    n_rrdb: int = 2
    time_embed_dim: int | None = None


@dataclass
class TrainSection:
    T: int = 50
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 7
    flip_prob: float = 0.5
    grad_clip: float | None = 1.0
    early_stop: bool = False
    plateau_epochs: int = 5
    plateau_rel: float = 0.01


@dataclass
class SampleSection:
    T: int = 50
    R: int = 4
    seed: int = 0
    record_trajectory: bool = False
    literal_coefficient: bool = False


@dataclass
class AblateSection:
    T_grid: list[int] = field(default_factory=lambda: [5, 25, 50])
    R_grid: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    # T used while sweeping R, and R used while sweeping T
    fixed_T: int | None = None
    fixed_R: int = 4
    n_pairs: int | None = None


@dataclass
class PathSection:
    data_dir: str = "runs/desk/data"
    run_dir: str = "runs/desk/train"
    recon_dir: str = "runs/desk/recon"
    eval_dir: str = "runs/desk/eval"
    ablate_dir: str = "runs/desk/ablate"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    paths: PathSection = field(default_factory=PathSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    # -- derived module configs --
    def denoiser_config(self) -> DenoiserConfig:
        d = self.denoiser
        return DenoiserConfig(
            base_channels=d.base_channels,
            channel_multipliers=tuple(d.channel_multipliers),
            n_rrdb=d.n_rrdb,
            time_embed_dim=d.time_embed_dim,
            T_max=self.train.T,
            in_h=self.image_shape[0],
            in_w=self.image_shape[1],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train))

    def sample_config(self) -> SampleConfig:
        return SampleConfig(**dataclasses.asdict(self.sample))

    @property
    def image_shape(self) -> tuple[int, int]:
        if self.data.resize_to:
            return tuple(self.data.resize_to)
        if self.data.pad_to:
            return tuple(self.data.pad_to)
        return self.data.height, self.data.width


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _section_cls(name):
    return {
        "data": DataSection,
        "denoiser": DenoiserSection,
        "train": TrainSection,
        "sample": SampleSection,
        "ablate": AblateSection,
        "paths": PathSection,
    }[name]


def from_dict(tree: dict | None) -> RunConfig:
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(tree) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name in _SECTIONS:
        cls = _section_cls(name)
        values = tree.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - known
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        sections[name] = cls(**values)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.denoiser_config()
        cfg.train_config()
        cfg.sample_config()
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value`` (leading dashes allowed); value parsed as YAML."""
    body = text.lstrip("-")
    if "=" not in body or "." not in body.split("=", 1)[0]:
        raise ConfigError(f"bad override {text!r}, expected --section.key=value")
    dotted, raw = body.split("=", 1)
    section, key = dotted.split(".", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}: {exc}") from exc
    return section, key, value


def load_config(path=None, overrides=()) -> RunConfig:
    tree: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    for ov in overrides:
        section, key, value = parse_override(ov)
        tree.setdefault(section, {})
        if not isinstance(tree[section], dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        tree[section][key] = value
    return from_dict(tree)
