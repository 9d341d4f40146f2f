"""Pipeline configuration: an INI-style file of ``key = value`` sections.

Sections and their keys mirror the dataclasses below; unknown sections or
keys are rejected.  Lists are comma separated.  ``config_hash`` is the
SHA-256 of the canonical JSON form (sorted keys, no whitespace) of the
parsed configuration, so two files that parse to the same values share a
hash regardless of layout or comments.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..dsp import FeatureConfig
from ..seq2seq import Seq2SeqConfig
from ..vae import VAEConfig
from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    patient: str = "P01"
    references: tuple[str, ...] = ("SP01", "SP02")
    auxiliary: tuple[str, ...] = ()
    genders: tuple[str, ...] = ()  # "SPEAKER:G" entries
    log_batches: bool = False

    def gender(self, speaker: str) -> str:
        for entry in self.genders:
            name, _, g = entry.partition(":")
            if name == speaker:
                return g
        return "U"


@dataclass(frozen=True)
class Stage1Config:
    decoder_epochs: int = 100
    encoder_epochs: int = 60
    vc_epochs: int = 100
    learning_rate: float = 2e-3
    batch_size: int = 8
    selection: str = "mcd"  # "mcd" or "loss"
    select_every: int = 10


@dataclass(frozen=True)
class VAETrainSection:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_frames: int = 256


@dataclass(frozen=True)
class EvaluationConfig:
    mcd_order: int = 24
    hypotheses: str = ""  # directory; empty means <out>/hyp
    asr: str = "none"  # "none" or "toy"


@dataclass(frozen=True)
class SynthesisConfig:
    griffin_lim_iterations: int = 60


@dataclass(frozen=True)
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    seq2seq: Seq2SeqConfig = field(default_factory=Seq2SeqConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    vae: VAEConfig = field(default_factory=VAEConfig)
    vae_train: VAETrainSection = field(default_factory=VAETrainSection)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    @property
    def speakers(self) -> tuple[str, ...]:
        """Every speaker the models know, in a fixed order."""
        return tuple(dict.fromkeys((self.run.patient, *self.run.references, *self.run.auxiliary)))

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


# n_mels of the model sections always follows [features]
_DERIVED = {"seq2seq": {"n_mels"}, "vae": {"n_mels"}}


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def _convert(section: str, key: str, raw: str, kind):
    origin = typing.get_origin(kind)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw.strip()
        if origin is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"[{section}] {key}: unsupported field type {kind}")


def _build(section: str, cls, values: dict[str, str], extra: dict | None = None):
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(section, set())
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    kwargs = {k: _convert(section, k, v, hints[k]) for k, v in values.items()}
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    sections = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    hints = typing.get_type_hints(PipelineConfig)
    unknown = sorted(set(parser.sections()) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; allowed: {sorted(sections)}")
    raw = {name: dict(parser[name]) if parser.has_section(name) else {} for name in sections}
    features = _build("features", FeatureConfig, raw["features"])
    built = {"features": features}
    for name in sections:
        if name == "features":
            continue
        extra = {"n_mels": features.n_mels} if name in _DERIVED else None
        built[name] = _build(name, hints[name], raw[name], extra)
    cfg = PipelineConfig(**built)
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    return parse_config(path.read_text())


def validate(cfg: PipelineConfig) -> None:
    if not cfg.run.references:
        raise ConfigError("[run] references: at least one reference speaker is required")
    if cfg.run.patient in cfg.run.references or cfg.run.patient in cfg.run.auxiliary:
        raise ConfigError("[run] patient must not also be a reference or auxiliary speaker")
    for entry in cfg.run.genders:
        if ":" not in entry:
            raise ConfigError(f"[run] genders: expected SPEAKER:G entries, got {entry!r}")
    if cfg.stage1.selection not in ("mcd", "loss"):
        raise ConfigError(f"[stage1] selection must be 'mcd' or 'loss', got {cfg.stage1.selection!r}")
    if cfg.evaluation.asr not in ("none", "toy"):
        raise ConfigError(f"[evaluation] asr must be 'none' or 'toy', got {cfg.evaluation.asr!r}")
    if not 1 <= cfg.evaluation.mcd_order < cfg.features.n_mels:
        raise ConfigError("[evaluation] mcd_order must lie in [1, n_mels)")
    for section in ("stage1", "vae_train"):
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            if f.name.endswith("epochs") and value < 0:
                raise ConfigError(f"[{section}] {f.name} must be nonnegative")


def dump_config(cfg: PipelineConfig) -> str:
    """Serialize back to the INI form (derived keys omitted)."""
    lines = []
    for name, section in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for key, value in section.items():
            if key in _DERIVED.get(name, set()):
                continue
            if isinstance(value, (list, tuple)):
                value = ", ".join(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
