"""Run configuration: one TOML file with a section per subsystem."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from graphfetch.amma import PredictorConfig
from graphfetch.baselines import BoConfig, IsbConfig
from graphfetch.cstp import CstpConfig
from graphfetch.detection import KswinConfig
from graphfetch.sim import CacheConfig
from graphfetch.trace import SynthConfig
from graphfetch.training import TrainHyper

OUTPUT_ENV = "GRAPHFETCH_OUTPUT"
PREFETCHERS = ("none", "bo", "isb", "cstp", "oracle")
DETECTORS = ("soft_kswin", "kswin", "soft_dt", "dt", "labels", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorSection:
    kind: str = "soft_kswin"
    kswin: KswinConfig = field(default_factory=KswinConfig)
    dt_history: int = 9
    dt_max_depth: int = 8
    dt_queue: int = 32
    lag_window: int = 600

    def __post_init__(self):
        if self.kind not in DETECTORS:
            raise ConfigError(f"detector.kind must be one of {DETECTORS}")


@dataclass(frozen=True)
class DistillSection:
    attn_dim: int = 8
    fusion_dim: int = 16
    trans_dim: int = 8
    heads: int = 4
    temperature: float = 2.0
    soft_weight: float = 0.5
    single_student: bool = False
    epochs: int = 10
    lr: float = 3e-3


@dataclass(frozen=True)
class SimSection:
    prefetchers: tuple[str, ...] = PREFETCHERS
    distance: int = 0
    oracle_degree: int = 6

    def __post_init__(self):
        bad = [p for p in self.prefetchers if p not in PREFETCHERS]
        if bad:
            raise ConfigError(f"unknown prefetcher(s) {bad}; choose from {PREFETCHERS}")
        if self.distance < 0:
            raise ConfigError("simulation.distance must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    synth: SynthConfig = field(default_factory=SynthConfig)
    detector: DetectorSection = field(default_factory=DetectorSection)
    predictor: PredictorConfig = field(
        default_factory=lambda: PredictorConfig(attn_dim=16, fusion_dim=32, trans_dim=32))
    train: TrainHyper = field(default_factory=lambda: TrainHyper(epochs=10, lr=3e-3))
    distill: DistillSection = field(default_factory=DistillSection)
    cstp: CstpConfig = field(default_factory=CstpConfig)
    bo: BoConfig = field(default_factory=BoConfig)
    isb: IsbConfig = field(default_factory=IsbConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    simulation: SimSection = field(default_factory=SimSection)
    output: str = "runs/default"

    def output_root(self) -> Path:
        """Relative output paths resolve under $GRAPHFETCH_OUTPUT when it is set."""
        root = Path(self.output)
        base = os.environ.get(OUTPUT_ENV)
        if base and not root.is_absolute():
            root = Path(base) / root
        return root


_SECTIONS = {
    "synth": SynthConfig,
    "detector": DetectorSection,
    "predictor": PredictorConfig,
    "train": TrainHyper,
    "distill": DistillSection,
    "cstp": CstpConfig,
    "bo": BoConfig,
    "isb": IsbConfig,
    "cache": CacheConfig,
    "simulation": SimSection,
}


def _coerce(cls, data: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in data.items():
        if k not in fields:
            raise ConfigError(f"[{where}] unknown key {k!r}")
        ftype = str(fields[k].type)
        if k == "kswin" and isinstance(v, dict):
            v = _coerce(KswinConfig, v, f"{where}.kswin")
        elif isinstance(v, list):
            v = tuple(v)
        elif "float" in ftype and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    if "seed" not in data:
        raise ConfigError("config must set a global 'seed'")
    seed = data.pop("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    kw = {"seed": seed}
    if "output" in data:
        out = data.pop("output")
        kw["output"] = out["root"] if isinstance(out, dict) else out
    defaults = RunConfig(seed=0)
    for name, sec in data.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        base = dataclasses.asdict(getattr(defaults, name))
        base.update(sec)
        kw[name] = _coerce(_SECTIONS[name], base, name)
    return RunConfig(**kw)


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    """Read a TOML config; ``overrides`` maps dotted keys (``"cstp.d_s"``, ``"seed"``) to values."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key, value in (overrides or {}).items():
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return config_from_dict(data)


def parse_override(text: str):
    """``section.key=value`` with the value read as a TOML literal (bare words are strings)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value
