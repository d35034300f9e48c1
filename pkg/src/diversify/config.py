"""Flat ``section.key = value`` experiment configuration.

Sections: ``data`` (generator and split), ``model`` (architecture),
``train`` (optimisation and DIVERSIFY hyperparameters) and ``analysis``
(divergence probe). Unknown keys are rejected; ``parse(serialize(c)) == c``.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields

from .analysis import FEATURE_SPACES, PROBES, ProbeConfig
from .dataio import SynthConfig
from .errors import ConfigError
from .model import ArchConfig
from .training import TrainConfig


@dataclass
class SplitConfig:
    val_ratio: float = 0.8
    holdout: int = -1  # true domain held out of training; -1 keeps all


@dataclass
class AnalysisConfig:
    probe: str = "linear"
    probe_hidden: int = 32
    probe_max_iter: int = 300
    n_probes: int = 3
    feature_space: str = "raw"

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(self.probe, self.probe_hidden, self.probe_max_iter, self.n_probes)

    def validate(self) -> None:
        if self.probe not in PROBES:
            raise ConfigError(f"choose from {PROBES}", "analysis.probe")
        if self.feature_space not in FEATURE_SPACES:
            raise ConfigError(f"choose from {FEATURE_SPACES}", "analysis.feature_space")
        for key in ("probe_hidden", "probe_max_iter", "n_probes"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", f"analysis.{key}")


@dataclass
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    # (section name, attribute) pairs; ``split`` lives in the data section
    _SECTIONS = (("data", "data"), ("data", "split"), ("model", "model"),
                 ("train", "train"), ("analysis", "analysis"))

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.analysis.validate()
        if not 0.0 < self.split.val_ratio < 1.0:
            raise ConfigError("must be in (0, 1)", "data.val_ratio")
        if self.split.holdout >= self.data.k_true:
            raise ConfigError(f"must be < k_true={self.data.k_true} or -1", "data.holdout")
        if self.model.channels != self.data.channels:
            raise ConfigError(f"{self.model.channels} != data.channels={self.data.channels}", "model.channels")
        if self.model.window != self.data.window:
            raise ConfigError(f"{self.model.window} != data.window={self.data.window}", "model.window")
        try:
            self.model.feature_length()
        except Exception as exc:  # ShapeError from the conv stack
            raise ConfigError(str(exc), "model.kernel_width") from exc

    def keys(self) -> list[str]:
        return [f"{sec}.{f.name}" for sec, attr in self._SECTIONS for f in fields(getattr(self, attr))]


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _strip_optional(tp):
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _decode(raw: str, tp, key: str):
    raw = raw.strip()
    tp, optional = _strip_optional(tp)
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            args = typing.get_args(tp)
            elem = args[0]
            items = [x.strip() for x in raw.split(",") if x.strip()]
            vals = tuple(elem(x) for x in items)
            if Ellipsis not in args and len(vals) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return vals
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}: {exc}", key) from exc
    raise ConfigError(f"unsupported field type {tp}", key)


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_encode(v) for v in value)
    return str(value)


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, attr in cfg._SECTIONS:
        obj = getattr(cfg, attr)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_encode(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _index(cfg: ExperimentConfig) -> dict[str, tuple[str, str]]:
    out = {}
    for sec, attr in cfg._SECTIONS:
        for f in fields(getattr(cfg, attr)):
            out[f"{sec}.{f.name}"] = (attr, f.name)
    return out


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    """New config with ``section.key -> raw string`` assignments applied."""
    index = _index(cfg)
    updates: dict[str, dict] = {}
    for key, raw in pairs.items():
        if key not in index:
            raise ConfigError("unknown key", key)
        attr, name = index[key]
        tp = _hints(type(getattr(cfg, attr)))[name]
        updates.setdefault(attr, {})[name] = _decode(raw, tp, key)
    parts = {attr: dataclasses.replace(getattr(cfg, attr), **upd) for attr, upd in updates.items()}
    return dataclasses.replace(cfg, **parts)


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {n}: expected 'section.key = value'", body)
        key, value = (s.strip() for s in body.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {n}: duplicate key", key)
        pairs[key] = value
    return pairs


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), parse_pairs(text))


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse(text)


def describe_defaults() -> str:
    return serialize(ExperimentConfig())
