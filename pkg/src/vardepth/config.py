"""Run configuration: one JSON file describing models, data, training, paths.

Loading is strict: any key the schema does not know about aborts with a
ConfigError naming its dotted path, before anything touches the filesystem.
Relative paths are resolved against the config file's directory so a run
directory can be moved wholesale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .guidance import GuidanceConfig, make_schedule
from .prior import PriorConfig
from .synthdata import FAMILIES, SceneConfig
from .tokenizer import DEFAULT_SCHEDULE, TokenizerConfig, validate_schedule
from .upsampler import UpsamplerConfig


def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) under {where}: {', '.join(unknown)}")


def _section(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a table, got {type(d).__name__}")
    names = [f.name for f in fields(cls)]
    _reject_unknown(d, names, where)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ModelSection:
    vocab_size: int = 256
    channels: int = 16
    n_scales: int = 10
    schedule: tuple = DEFAULT_SCHEDULE
    d_model: int = 128
    blocks: int = 6
    heads: int = 4

    def __post_init__(self):
        self.schedule = validate_schedule(self.schedule)
        if len(self.schedule) != self.n_scales:
            raise ConfigError(f"schedule has {len(self.schedule)} entries, "
                              f"n_scales says {self.n_scales}")


@dataclass
class DataSection:
    root: str = "data"
    train_samples: int = 200
    val_samples: int = 20
    test_samples: int = 50
    height: int = 48
    width: int = 64
    base_seed: int = 0
    far: float = 20.0
    # train-mix rule: every empty_every-th sample renders an empty scene,
    # the rest alternate indoor / roadway
    empty_every: int = 10

    def __post_init__(self):
        if min(self.train_samples, self.val_samples, self.test_samples) < 0:
            raise ConfigError("split sizes must be non-negative")
        if self.empty_every < 2:
            raise ConfigError("empty_every must be >= 2")


@dataclass
class TrainingSection:
    seed: int = 0
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    cond_dropout: float = 0.1
    tokenizer_epochs: int = 12
    tokenizer_lr: float = 1e-3
    prior_lr: float = 3e-4
    prior_phase1_epochs: int = 6
    prior_phase2_epochs: int = 16
    upsampler_lr: float = 1e-4
    upsampler_phase1_epochs: int = 8
    upsampler_phase2_epochs: int = 4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("tokenizer_lr", "prior_lr", "upsampler_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class GuidanceSection:
    preset: str | None = "optimized"
    weights: tuple | None = None
    temperature: float = 1.0
    top_k: int = 0  # 0 means the full vocabulary (no truncation)
    late_weight: float = 3.5

    def __post_init__(self):
        if (self.preset is None) == (self.weights is None):
            raise ConfigError("guidance needs exactly one of preset / weights")
        if self.weights is not None:
            self.weights = tuple(float(w) for w in self.weights)


@dataclass
class PathsSection:
    checkpoints: str = "checkpoints"
    outputs: str = "outputs"
    logs: str = "logs"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config root must be a table, got {type(d).__name__}")
        _reject_unknown(d, [f.name for f in fields(cls)], "the config root")
        return cls(model=_section(ModelSection, d.get("model", {}), "model"),
                   data=_section(DataSection, d.get("data", {}), "data"),
                   training=_section(TrainingSection, d.get("training", {}), "training"),
                   guidance=_section(GuidanceSection, d.get("guidance", {}), "guidance"),
                   paths=_section(PathsSection, d.get("paths", {}), "paths"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["schedule"] = [list(s) for s in self.model.schedule]
        if d["guidance"]["weights"] is not None:
            d["guidance"]["weights"] = list(d["guidance"]["weights"])
        return d

    # builders shared by the CLI, the pipeline, and tests

    def depth_tokenizer_config(self) -> TokenizerConfig:
        m = self.model
        return TokenizerConfig(in_channels=1, out_channels=1,
                               vocab_size=m.vocab_size, latent_channels=m.channels,
                               schedule=m.schedule)

    def rgb_tokenizer_config(self) -> TokenizerConfig:
        m = self.model
        return TokenizerConfig(in_channels=3, out_channels=3,
                               vocab_size=m.vocab_size, latent_channels=m.channels,
                               schedule=m.schedule)

    def prior_config(self) -> PriorConfig:
        m = self.model
        return PriorConfig(vocab_size=m.vocab_size, cond_channels=m.channels,
                           schedule=m.schedule, d_model=m.d_model,
                           n_blocks=m.blocks, n_heads=m.heads,
                           cond_dropout=self.training.cond_dropout)

    def upsampler_config(self) -> UpsamplerConfig:
        return UpsamplerConfig(latent_channels=self.model.channels,
                               n_scales=self.model.n_scales)

    def scene_config(self, family: str = "indoor") -> SceneConfig:
        d = self.data
        return SceneConfig(height=d.height, width=d.width, family=family, far=d.far)

    def effective_top_k(self) -> int:
        """Sampling truncation width; 0 in the config means the full vocabulary."""
        return self.guidance.top_k if self.guidance.top_k > 0 else self.model.vocab_size

    def guidance_config(self, seed: int | None = None) -> GuidanceConfig:
        g = self.guidance
        return make_schedule(g.preset if g.preset is not None else g.weights,
                             n_scales=self.model.n_scales,
                             temperature=g.temperature, top_k=self.effective_top_k(),
                             seed=self.training.seed if seed is None else seed,
                             late_weight=g.late_weight)

    def family_for_index(self, index: int) -> str:
        """Deterministic train-mix rule used by data generation."""
        if index % self.data.empty_every == self.data.empty_every - 1:
            return FAMILIES[0]
        return FAMILIES[1] if index % 2 == 0 else FAMILIES[2]


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a JSON run config and resolve its paths against the file's dir."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except ValueError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if overrides:
        for key, value in overrides.items():
            raw.setdefault(key, {}).update(value)
    cfg = RunConfig.from_dict(raw)
    base = p.resolve().parent
    cfg.data.root = str((base / cfg.data.root).resolve())
    for name in ("checkpoints", "outputs", "logs"):
        setattr(cfg.paths, name, str((base / getattr(cfg.paths, name)).resolve()))
    return cfg


def default_config() -> RunConfig:
    return RunConfig()
