"""Experiment configuration: a versioned JSON document whose content hash names the run."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .admm import ADMMConfig
from .baselines import MagnitudePruneConfig
from .objective import NTPLossConfig
from .transferability import FineTuneConfig

CONFIG_VERSION = 1
STAGES = ("data", "pretrain", "prune", "finetune")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (a usage error)."""


def stage_seed(global_seed: int, stage: str) -> int:
    """Deterministic 31-bit seed for one pipeline stage."""
    ss = np.random.SeedSequence(int(global_seed), spawn_key=(STAGES.index(stage),))
    return int(ss.generate_state(1)[0] >> 1)


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"
    # synthetic pair
    num_classes: int = 10
    per_class: int = 300
    image_size: tuple = (32, 32, 3)
    shift: str = "background_noise"
    # image folders / archives
    source: str | None = None
    target: str | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.kind not in ("synthetic", "folders"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'folders', got {self.kind!r}")
        if self.kind == "folders" and (not self.source or not self.target):
            raise ConfigError("data.kind='folders' needs both data.source and data.target")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    step_size: int = 10
    step_gamma: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("pretrain needs epochs >= 0, batch_size >= 1 and lr > 0")


@dataclass(frozen=True)
class GridSpec:
    sizes: tuple = (32, 64, 128, 256, 512)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ConfigError("grid.sizes must be strictly increasing with at least two entries")
        if self.sizes[0] < 1:
            raise ConfigError("grid sizes must be positive")


# seed fields are derived from the global seed, never written by hand
_EXCLUDED = {"admm": {"seed"}, "finetune": {"seeds"}}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    architecture: str = "small_cnn"
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    loss: NTPLossConfig = field(default_factory=NTPLossConfig)
    admm: ADMMConfig = field(default_factory=ADMMConfig)
    magnitude: MagnitudePruneConfig = field(default_factory=MagnitudePruneConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    num_seeds: int = 5
    grid: GridSpec = field(default_factory=GridSpec)
    seed: int = 0
    version: int = CONFIG_VERSION

    # ------------------------------------------------------------ derived
    def seed_for(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def admm_config(self) -> ADMMConfig:
        return replace(self.admm, seed=self.seed_for("prune"))

    def finetune_config(self, scheme: str | None = None, revive_zeros: bool | None = None) -> FineTuneConfig:
        base = self.seed_for("finetune") % 1_000_000
        changes = {"seeds": tuple(base + i for i in range(self.num_seeds))}
        if scheme is not None:
            changes["scheme"] = scheme
        if revive_zeros is not None:
            changes["revive_zeros"] = revive_zeros
        return replace(self.finetune, **changes)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    # ------------------------------------------------------------ serialisation
    def to_dict(self) -> dict:
        out = {"version": self.version, "seed": self.seed, "architecture": self.architecture,
               "num_seeds": self.num_seeds}
        for name in ("data", "pretrain", "loss", "admm", "magnitude", "finetune", "grid"):
            d = asdict(getattr(self, name))
            for k in _EXCLUDED.get(name, ()):
                d.pop(k, None)
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = copy.deepcopy(raw)
        version = raw.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
        sections = {"data": DataSpec, "pretrain": PretrainSpec, "loss": NTPLossConfig, "admm": ADMMConfig,
                    "magnitude": MagnitudePruneConfig, "finetune": FineTuneConfig, "grid": GridSpec}
        scalars = {"architecture": str, "num_seeds": int, "seed": int}
        unknown = set(raw) - set(sections) - set(scalars)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in scalars.items():
            if name in raw:
                if not isinstance(raw[name], typ) or isinstance(raw[name], bool):
                    raise ConfigError(f"{name} must be of type {typ.__name__}")
                kwargs[name] = raw[name]
        for name, typ in sections.items():
            if name not in raw:
                continue
            sec = raw[name]
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)} - _EXCLUDED.get(name, set())
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = typ(**sec)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        cfg = cls(**kwargs)
        if cfg.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

