"""Run configuration: one JSON document with a strict schema and a content hash.

Every section maps onto the dataclass that owns it; unknown keys anywhere
raise ConfigError. The hash is the sha256 of the canonical serialization
(sorted keys, no whitespace), so two configs that load to the same values
share a hash regardless of key order or formatting in the file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .diffusion import GuidanceScales, SamplerConfig, build_schedule
from .errors import ConfigError
from .nn import DenoiserConfig
from .pipeline import RecipeConfig
from .scenes import CorpusConfig, DuplicateCorpusConfig
from .trainer import PhaseConfig


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return build_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class MetricsConfig:
    feature_seed: int = 0


def _strict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    duplicate_corpus: DuplicateCorpusConfig = field(default_factory=DuplicateCorpusConfig)
    phases: tuple = field(default_factory=lambda: tuple(PhaseConfig.default(i) for i in range(4)))
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if len(self.phases) != 4 or [p.phase for p in self.phases] != [0, 1, 2, 3]:
            raise ConfigError("phases must list configs for phases 0, 1, 2 and 3 in order")
        self.model.validate()
        self.corpus.validate()

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "sampler": self.sampler.to_dict(),
            "scales": asdict(self.scales),
            "corpus": self.corpus.to_dict(),
            "duplicate_corpus": self.duplicate_corpus.to_dict(),
            "phases": [p.to_dict() for p in self.phases],
            "metrics": asdict(self.metrics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        kw = {}
        if "seed" in d:
            if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
                raise ConfigError("seed must be an integer")
            kw["seed"] = d["seed"]
        sections = {"model": DenoiserConfig, "schedule": ScheduleConfig, "sampler": SamplerConfig,
                    "scales": GuidanceScales, "corpus": CorpusConfig, "duplicate_corpus": DuplicateCorpusConfig,
                    "metrics": MetricsConfig}
        for name, sub in sections.items():
            if name in d:
                merged = {**_section_dict(getattr(base, name)), **_check_obj(d[name], name)}
                kw[name] = _strict(sub, merged, name)
        if "phases" in d:
            if not isinstance(d["phases"], list):
                raise ConfigError("phases must be a list")
            if len(d["phases"]) != 4:
                raise ConfigError("phases must list configs for phases 0, 1, 2 and 3 in order")
            phases = []
            for i, p in enumerate(d["phases"]):
                merged = {**base.phases[i].to_dict(), **_check_obj(p, f"phases[{i}]")}
                try:
                    phases.append(PhaseConfig.from_dict(merged))
                except TypeError as exc:
                    raise ConfigError(f"phases[{i}]: {exc}") from exc
            kw["phases"] = tuple(phases)
        return cls(**kw)

    def canonical(self) -> bytes:
        return canonical_json(self.to_dict())

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()

    # -- derived settings

    def seeded(self, seed: int) -> RunConfig:
        return replace(self, seed=seed)

    def recipe(self) -> RecipeConfig:
        r = RecipeConfig(model=self.model, corpus=self.corpus, phase0=self.phases[0], phase1=self.phases[1],
                         phase2=self.phases[2], phase3=self.phases[3], sampler=self.sampler, scales=self.scales)
        return r.seeded(self.seed)


def _check_obj(d, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    return d


def _section_dict(obj) -> dict:
    return obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    return cfg.config_hash
