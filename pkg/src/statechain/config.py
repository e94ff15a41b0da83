"""Experiment configuration: one TOML document with a table per component.

Unknown tables or keys are rejected.  The canonical form has sorted keys
and numbers coerced to the declared field type, and ``config_hash`` is the
SHA-256 of that text, so key order and ``1`` vs ``1.0`` do not matter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

import tomli
import tomli_w

from .flow import EPS_T, InterpolantSchedule
from .network import NetworkConfig
from .sampler import SamplerConfig
from .train import ToyDataset, TrainerConfig


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "gvp"
    eps_t: float = EPS_T

    def __post_init__(self):
        InterpolantSchedule(self.kind)
        if not 0.0 < self.eps_t < 1.0:
            raise ValueError("eps_t must lie in (0, 1)")


@dataclass(frozen=True)
class SamplerSettings:
    method: str = "rk4_fixed"
    nfe_budget: int = 50
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10_000

    def __post_init__(self):
        SamplerConfig(self.method, self.nfe_budget, self.rtol, self.atol, max_steps=self.max_steps)


@dataclass(frozen=True)
class DataConfig:
    generator: str = "gauss_blobs"
    seed: int = 0


SECTIONS = {
    "network": NetworkConfig,
    "schedule": ScheduleConfig,
    "sampler": SamplerSettings,
    "trainer": TrainerConfig,
    "data": DataConfig,
}


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    # -- views used by the training code
    @property
    def dataset(self) -> ToyDataset:
        return ToyDataset(self.data.generator, self.network.height, self.network.width, self.data.seed)

    @property
    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(s.method, s.nfe_budget, s.rtol, s.atol, self.schedule.eps_t, s.max_steps)

    @property
    def interpolant(self) -> InterpolantSchedule:
        return InterpolantSchedule(self.schedule.kind)

    # -- serialization
    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["seed"] = self.seed
        return _sorted(out)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @property
    def budget_hash(self) -> str:
        """Hash of everything except the state-chain flag: equal for a matched on/off pair."""
        d = self.to_dict()
        d["network"].pop("arcee_enabled")
        return hashlib.sha256(tomli_w.dumps(d).encode()).hexdigest()

    def replace(self, seed=None, **network_changes) -> "ExperimentConfig":
        return dataclasses.replace(self, network=dataclasses.replace(self.network, **network_changes),
                                   seed=self.seed if seed is None else seed)


def _sorted(d):
    return {k: _sorted(v) if isinstance(v, dict) else v for k, v in sorted(d.items())}


def _coerce(cls, section, raw):
    if not isinstance(raw, dict):
        raise ValueError(f"[{section}] must be a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    out = {}
    for key, value in raw.items():
        want = hints[key]
        if want is bool:
            ok = isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:
            ok = isinstance(value, want)
        if not ok:
            raise ValueError(f"[{section}] {key}: expected {want.__name__}, got {value!r}")
        out[key] = value
    return cls(**out)


def from_dict(doc: dict) -> ExperimentConfig:
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ValueError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw = {name: _coerce(cls, name, doc[name]) for name, cls in SECTIONS.items() if name in doc}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ValueError("seed must be an integer")
    return ExperimentConfig(**kw, seed=seed)


def loads(text: str) -> ExperimentConfig:
    return from_dict(tomli.loads(text))


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return from_dict(tomli.load(fh))
