"""Experiment configuration: one YAML or JSON file per invocation.

Every section maps onto a dataclass; unknown keys and bad values are rejected
before any work starts.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .alignment import MuirConfig
from .architectures import BUILTIN
from .bank import CONTEXT_SCALES, SIGMA_H_RULES
from .decomposition import LayerSpec
from .synthetic import SETUPS, SIGMA_H_RULE, SyntheticConfig, default_muir_config
from .theory import INIT, SAMPLING

KINDS = ("synthetic", "theory", "decompose", "analyze")


class ConfigError(ValueError):
    pass


def _build(cls, data: dict | None, where: str, base=None):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(names)}")
    try:
        if base is not None:
            return dataclasses.replace(base, **data)
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class BankSection:
    c: int = 1
    m: int = 16
    n: int = 16
    sigma_h_rule: str = SIGMA_H_RULE
    context_scale: str = "sqrt"

    def __post_init__(self):
        if self.c < 0 or self.m < 1 or self.n < 1:
            raise ValueError(f"invalid bank shape c={self.c} m={self.m} n={self.n}")
        if self.sigma_h_rule not in SIGMA_H_RULES:
            raise ValueError(f"sigma_h_rule must be one of {SIGMA_H_RULES}")
        if self.context_scale not in CONTEXT_SCALES:
            raise ValueError(f"context_scale must be one of {CONTEXT_SCALES}")


@dataclass
class TheorySweep:
    """One grid of EA runs. ``K`` and entries of ``D`` may be the string "L"."""

    name: str
    L: list[int]
    K: Any = "L"
    D: list = field(default_factory=lambda: ["L"])
    lam: int = 1
    sampling: str = "proportional"
    init: str = "pessimistic"
    trials: int = 200
    by: str = "L"
    check: str = "fit"  # fit | ordering
    predictor: str = "log_L"
    r2_min: float = 0.9
    min_ratio: float = 2.0
    max_iter: int = 1_000_000

    def __post_init__(self):
        if isinstance(self.L, int):
            self.L = [self.L]
        if not isinstance(self.D, list):
            self.D = [self.D]
        if not self.L or any(int(x) < 1 for x in self.L):
            raise ValueError(f"sweep {self.name}: L must be a non-empty list of positive ints")
        if self.K != "L" and (not isinstance(self.K, int) or self.K < 1):
            raise ValueError(f"sweep {self.name}: K must be a positive int or 'L'")
        for d in self.D:
            if d != "L" and (not isinstance(d, int) or d < 1):
                raise ValueError(f"sweep {self.name}: D entries must be positive ints or 'L'")
        if self.sampling not in SAMPLING or self.init not in INIT:
            raise ValueError(f"sweep {self.name}: bad sampling/init")
        if self.trials < 1:
            raise ValueError(f"sweep {self.name}: trials must be positive")
        if self.by not in ("L", "D"):
            raise ValueError(f"sweep {self.name}: by must be 'L' or 'D'")
        if self.check not in ("fit", "ordering"):
            raise ValueError(f"sweep {self.name}: check must be 'fit' or 'ordering'")
        if self.predictor not in ("log_L", "KLlogL", "theorem"):
            raise ValueError(f"sweep {self.name}: unknown predictor {self.predictor!r}")

    def grid(self) -> list[tuple[int, int, int]]:
        """(L, K, D) triples in sweep order."""
        out = []
        for L in self.L:
            K = L if self.K == "L" else self.K
            for d in self.D:
                out.append((int(L), int(K), int(L if d == "L" else d)))
        return out


@dataclass
class TheorySection:
    sweeps: list[TheorySweep] = field(default_factory=list)
    chunk: int = 256

    @classmethod
    def from_dict(cls, data: dict | None) -> "TheorySection":
        data = dict(data or {})
        raw = data.pop("sweeps", [])
        sec = _build(cls, data, "theory")
        if not isinstance(raw, list):
            raise ConfigError("theory.sweeps must be a list")
        sec.sweeps = [_build(TheorySweep, s, f"theory.sweeps[{i}]") for i, s in enumerate(raw)]
        names = [s.name for s in sec.sweeps]
        if len(set(names)) != len(names):
            raise ConfigError("theory.sweeps: names must be unique")
        return sec


@dataclass
class DecomposeSection:
    architecture: str | None = None
    layers: list[dict] | None = None
    policy: str = "strict"
    reserve_adapters: bool = True

    def __post_init__(self):
        if (self.architecture is None) == (self.layers is None):
            raise ValueError("give exactly one of 'architecture' (builtin name) or 'layers'")
        if self.architecture is not None and self.architecture not in BUILTIN:
            raise ValueError(f"unknown builtin architecture {self.architecture!r}; choose from {sorted(BUILTIN)}")
        if self.policy not in ("strict", "truncate"):
            raise ValueError("policy must be 'strict' or 'truncate'")
        if self.layers is not None:
            if not isinstance(self.layers, list) or len(self.layers) < 1:
                raise ValueError("layers must be a non-empty list")
            self.layer_specs()  # parse errors surface at load time

    def layer_specs(self) -> list[LayerSpec]:
        if self.architecture is not None:
            return BUILTIN[self.architecture]()
        return [LayerSpec.from_dict(d) for d in self.layers]


@dataclass
class AnalyzeSection:
    run_dir: str = ""

    def __post_init__(self):
        if not self.run_dir:
            raise ValueError("analyze.run_dir is required")


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs/out"
    setups: list[str] = field(default_factory=lambda: list(SETUPS))
    muir: MuirConfig = field(default_factory=default_muir_config)
    bank: BankSection = field(default_factory=BankSection)
    dataset: SyntheticConfig = field(default_factory=SyntheticConfig)
    theory: TheorySection = field(default_factory=TheorySection)
    decompose: DecomposeSection | None = None
    analyze: AnalyzeSection | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.kind == "synthetic":
            if not self.setups:
                raise ConfigError("setups must be non-empty")
            bad = [s for s in self.setups if s not in SETUPS]
            if bad:
                raise ConfigError(f"unknown setup(s) {bad}; choose from {sorted(SETUPS)}")
        if self.kind == "theory" and not self.theory.sweeps:
            raise ConfigError("theory runs need at least one sweep")
        if self.kind == "decompose" and self.decompose is None:
            raise ConfigError("decompose runs need a 'decompose' section")
        if self.kind == "analyze" and self.analyze is None:
            raise ConfigError("analyze runs need an 'analyze' section")

    def to_dict(self) -> dict:
        return asdict(self)


TOP_KEYS = {f.name for f in fields(ExperimentConfig)}


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed {sorted(TOP_KEYS)}")
    if "kind" not in data:
        raise ConfigError("config needs a 'kind'")
    cfg = ExperimentConfig(kind=data["kind"])
    if "seeds" in data:
        cfg.seeds = data["seeds"]
    if "out" in data:
        cfg.out = str(data["out"])
    if "setups" in data:
        cfg.setups = list(data["setups"])
    cfg.muir = _build(MuirConfig, data.get("muir"), "muir", base=default_muir_config())
    cfg.bank = _build(BankSection, data.get("bank"), "bank")
    cfg.dataset = _build(SyntheticConfig, data.get("dataset"), "dataset")
    cfg.theory = TheorySection.from_dict(data.get("theory"))
    if data.get("decompose") is not None:
        cfg.decompose = _build(DecomposeSection, data["decompose"], "decompose")
    if data.get("analyze") is not None:
        cfg.analyze = _build(AnalyzeSection, data["analyze"], "analyze")
    cfg.validate()
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    return load_with_overrides(path)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.field=value`` overrides (values parsed as YAML scalars)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if isinstance(value, (dict, list)):
            raise ConfigError(f"override {key}: only scalar values can be overridden")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
        node[parts[-1]] = value
    return data


def load_with_overrides(path: str | Path, overrides: list[str] | None = None, **top) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = apply_overrides(data, overrides or [])
    for k, v in top.items():
        if v is not None:
            data[k] = v
    return from_dict(data)
