"""Pipeline configuration: an INI file checked against a fixed schema.

Every section and key is optional and falls back to the defaults below;
unknown sections or keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .importance import Metric
from .pruner import ComparisonGroup, PatternKind, SparsityPattern

METHODS = ("magnitude", "wanda", "sparsegpt")
SOURCES = ("synthetic", "text-file")
EVAL_METRICS = ("perplexity", "output_deviation")


@dataclass
class ModelSection:
    path: Optional[str] = None
    seed: int = 0
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 172
    vocab_size: int = 256
    rope: bool = True


@dataclass
class CalibSection:
    source: str = "synthetic"
    path: Optional[str] = None
    samples: int = 16
    seq_len: int = 32
    batch_size: int = 4
    seed: int = 0


@dataclass
class RotatorSection:
    enabled: bool = True
    steps: int = 200
    lr: float = 0.01
    block_count: int = 1
    seed: int = 0
    metric: str = "auto"
    epsilon: float = 1e-12
    workers: int = 1


@dataclass
class PruneSection:
    method: str = "sparsegpt"
    pattern: str = "2:4"
    ratio: float = 0.5
    comparison_group: str = "per-row"
    damp: float = 0.01
    block_size: int = 4


@dataclass
class EvalSection:
    source: str = "synthetic"
    path: Optional[str] = None
    samples: int = 4
    seq_len: int = 32
    seed: int = 1
    metrics: tuple = EVAL_METRICS


@dataclass
class OutputSection:
    dir: str = "out"
    figures: bool = True


@dataclass
class PipelineConfig:
    model: ModelSection = field(default_factory=ModelSection)
    calib: CalibSection = field(default_factory=CalibSection)
    rotator: RotatorSection = field(default_factory=RotatorSection)
    prune: PruneSection = field(default_factory=PruneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        validate(self)

    @property
    def pattern(self) -> SparsityPattern:
        return SparsityPattern.parse(self.prune.pattern, self.prune.ratio)

    @property
    def train_metric(self) -> Metric:
        if self.rotator.metric == "auto":
            return Metric(self.prune.method)
        return Metric(self.rotator.metric)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["metrics"] = list(d["eval"]["metrics"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {}
        for f in fields(cls):
            sec_cls = f.default_factory
            raw = dict(d.get(f.name, {}))
            unknown = set(raw) - {g.name for g in fields(sec_cls)}
            if unknown:
                raise ConfigError(f"[{f.name}] unknown keys: {', '.join(sorted(unknown))}")
            if "metrics" in raw:
                raw["metrics"] = tuple(raw["metrics"])
            sections[f.name] = sec_cls(**raw)
        return cls(**sections)


def _convert(section, key, text, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {text!r}") from None
    if typ is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected a number, got {text!r}") from None
    if typ is tuple:
        return tuple(x.strip() for x in text.split(",") if x.strip())
    return text


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple, "Optional[str]": str}


def parse_config(text: str, base_dir: Optional[Path] = None) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {f.name: f.default_factory for f in fields(PipelineConfig)}
    values = {}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        types = {f.name: _TYPES[f.type] for f in fields(known[section])}
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            val = _convert(section, key, raw, types[key])
            if key in ("path", "dir") and base_dir is not None and val and not Path(val).is_absolute():
                val = str(base_dir / val)
            values[section][key] = val
    return PipelineConfig.from_dict(values)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def _positive(section, **values):
    for key, v in values.items():
        if v < 1:
            raise ConfigError(f"[{section}] {key} must be >= 1, got {v}")


def validate(cfg: PipelineConfig) -> PipelineConfig:
    m = cfg.model
    _positive("model", hidden_dim=m.hidden_dim, n_layers=m.n_layers, n_heads=m.n_heads,
              head_dim=m.head_dim, ffn_dim=m.ffn_dim, vocab_size=m.vocab_size)
    if m.hidden_dim != m.n_heads * m.head_dim:
        raise ConfigError("[model] hidden_dim must equal n_heads * head_dim")
    if m.rope and m.head_dim % 2:
        raise ConfigError("[model] rope needs an even head_dim")

    for name, sec in (("calib", cfg.calib), ("eval", cfg.eval)):
        if sec.source not in SOURCES:
            raise ConfigError(f"[{name}] source must be one of {SOURCES}, got {sec.source!r}")
        if sec.source == "text-file" and not sec.path:
            raise ConfigError(f"[{name}] source text-file needs a path")
        _positive(name, samples=sec.samples, seq_len=sec.seq_len)
    _positive("calib", batch_size=cfg.calib.batch_size)
    bad = set(cfg.eval.metrics) - set(EVAL_METRICS)
    if bad:
        raise ConfigError(f"[eval] unknown metrics {sorted(bad)}; choose from {EVAL_METRICS}")

    r = cfg.rotator
    if r.steps < 0:
        raise ConfigError("[rotator] steps must be >= 0")
    if not r.lr > 0:
        raise ConfigError("[rotator] lr must be positive")
    if not r.epsilon >= 0:
        raise ConfigError("[rotator] epsilon must be >= 0")
    _positive("rotator", block_count=r.block_count, workers=r.workers)
    if m.hidden_dim % r.block_count:
        raise ConfigError(f"[rotator] block_count {r.block_count} does not divide hidden_dim {m.hidden_dim}")
    if r.metric != "auto":
        try:
            Metric(r.metric)
        except ValueError:
            raise ConfigError(f"[rotator] unknown metric {r.metric!r}") from None

    p = cfg.prune
    if p.method not in METHODS:
        raise ConfigError(f"[prune] method must be one of {METHODS}, got {p.method!r}")
    try:
        pattern = SparsityPattern.parse(p.pattern, p.ratio)
        group = ComparisonGroup(p.comparison_group)
    except ValueError as exc:
        raise ConfigError(f"[prune] {exc}") from None
    if p.damp < 0:
        raise ConfigError("[prune] damp must be >= 0")
    _positive("prune", block_size=p.block_size)
    if pattern.kind is PatternKind.N_OF_M:
        if group is not ComparisonGroup.PER_ROW:
            raise ConfigError("[prune] n:m patterns always compare within a row group; use per-row")
        for label, cols in (("hidden_dim", m.hidden_dim), ("ffn_dim", m.ffn_dim)):
            if cols % pattern.m:
                raise ConfigError(f"[prune] {label} {cols} is not divisible by m={pattern.m}")
        if p.method == "sparsegpt" and p.block_size % pattern.m and pattern.m % p.block_size:
            raise ConfigError(f"[prune] block_size {p.block_size} must be a multiple or divisor of m={pattern.m}")
    return cfg
