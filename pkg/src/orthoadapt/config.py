"""Run configuration: sectioned ``key = value`` files, validated on load.

Every field has a default, so an empty file (or none at all) is a complete
configuration. Unknown sections and keys are rejected. ``RunConfig.dumps``
renders the fully resolved configuration in canonical order; commands write
it next to their outputs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import CORRUPTION_KINDS, DEFAULT_DOMAINS, DomainSpec
from .engine import LR_PRESETS, EngineConfig
from .errors import ConfigurationError
from .masking import Fill, MaskSpec
from .toy import ToyConfig
from .training import PretrainConfig

PRESETS = tuple(LR_PRESETS)


@dataclass(frozen=True)
class DataConfig:
    height: int = 48
    width: int = 64
    classes: int = 5
    samples_per_domain: int = 40
    rounds: int = 3
    domains: tuple[str, ...] = tuple(f"{d.name}:{d.kind}:{d.severity}" for d in DEFAULT_DOMAINS)

    def __post_init__(self):
        if self.height < 16 or self.width < 16 or self.height % 2 or self.width % 2:
            raise ConfigurationError("data height/width must be even and >= 16")
        if self.classes < 2:
            raise ConfigurationError("data needs at least 2 classes")
        if self.samples_per_domain < 1 or self.rounds < 1:
            raise ConfigurationError("samples_per_domain and rounds must be >= 1")
        self.domain_specs()

    def domain_specs(self) -> list[DomainSpec]:
        specs = []
        for item in self.domains:
            parts = item.split(":")
            if len(parts) != 3:
                raise ConfigurationError(f"domain {item!r} must read name:kind:severity")
            name, kind, sev = parts
            if kind not in CORRUPTION_KINDS:
                raise ConfigurationError(f"domain {name!r}: unknown kind {kind!r}")
            try:
                severity = float(sev)
            except ValueError:
                raise ConfigurationError(f"domain {name!r}: severity {sev!r} is not a number") from None
            if not 0.0 <= severity <= 1.0:
                raise ConfigurationError(f"domain {name!r}: severity must lie in [0, 1]")
            specs.append(DomainSpec(name, kind, severity))
        if not specs:
            raise ConfigurationError("at least one domain is required")
        if len({s.name for s in specs}) != len(specs):
            raise ConfigurationError("duplicate domain names")
        return specs


@dataclass(frozen=True)
class AdaptConfig:
    adapters: bool = True
    rank: int = 32
    sigma: float = 0.02
    placement: tuple[str, ...] = ("enc2", "enc3")
    orth: bool = True
    lam: float = 1.0
    orth_reduction: str = "mean"
    fill: str = "zero"
    grid: int = 32
    ratio: float = 0.75
    scales: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    scale_average: str = "probs"
    pseudo_label: str = "soft"
    ema: float = 0.999
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 1

    def __post_init__(self):
        if self.fill != "none" and self.fill not in {f.value for f in Fill}:
            raise ConfigurationError(f"fill must be zero, max, alternate or none, got {self.fill!r}")
        if self.orth_reduction not in ("mean", "sum", "norm"):
            raise ConfigurationError(f"unknown orth_reduction {self.orth_reduction!r}")
        if self.batch != 1:
            raise ConfigurationError("online adaptation runs with batch size 1")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.rank < 1:
            raise ConfigurationError("rank must be >= 1")
        self.engine_config(0)

    def engine_config(self, seed: int) -> EngineConfig:
        mask = None if self.fill == "none" else MaskSpec(self.grid, self.ratio, Fill(self.fill))
        return EngineConfig(
            use_adapters=self.adapters, rank=self.rank, sigma=self.sigma,
            placement=self.placement, use_orth=self.orth, lam=self.lam,
            orth_reduction=self.orth_reduction, mask=mask, scales=self.scales,
            scale_average=self.scale_average, pseudo_label=self.pseudo_label,
            ema=self.ema, lr=self.lr, betas=(self.beta1, self.beta2), seed=seed,
        )


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    preset: str = "main-text"
    seeds: int = 5

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.seeds < 1:
            raise ConfigurationError("seeds must be >= 1")


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "adapt": AdaptConfig,
    "toy": ToyConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    @property
    def seed(self) -> int:
        return self.run.seed

    def engine_config(self, seed: int | None = None) -> EngineConfig:
        return self.adapt.engine_config(self.seed if seed is None else seed)

    def with_overrides(self, seed: int | None = None, preset: str | None = None) -> "RunConfig":
        """Apply command-line ``--seed`` / ``--preset``; a preset sets the adaptation lr."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=seed))
        if preset is not None:
            cfg = replace(cfg, run=replace(cfg.run, preset=preset),
                          adapt=replace(cfg.adapt, lr=LR_PRESETS[preset]))
        return cfg

    def dumps(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            lines.append(f"[{section}]")
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(raw: str, kind: type, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def _parse_value(raw: str, default: Any, key: str):
    if isinstance(default, tuple):
        elem = type(default[0]) if default else str
        items = [p for p in (s.strip() for s in raw.split(",")) if p]
        return tuple(_parse_scalar(p, elem, key) for p in items)
    return _parse_scalar(raw, type(default), key)


def _build(cls: type, items: dict[str, str], section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(items) - set(known))
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _parse_value(v, getattr(defaults, k), f"{section}.{k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    unknown = sorted(set(parser.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown sections: {', '.join(unknown)}")
    parts = {name: _build(cls, dict(parser[name]) if parser.has_section(name) else {}, name)
             for name, cls in SECTIONS.items()}
    return RunConfig(**parts)


def load(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return loads(p.read_text(encoding="utf-8"))


__all__ = ["AdaptConfig", "DataConfig", "RunConfig", "RunSection", "load", "loads", "PRESETS"]
