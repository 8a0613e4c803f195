"""Experiment configuration: nested JSON sections with committed defaults.

Schema (every key optional; missing keys take the dataclass defaults)::

    {
      "corpus": {...CorpusConfig fields...},
      "ssl":    {...SSLEncoderConfig fields...},
      "p2h":    {...P2HConfig fields except the style-adaptor ones...},
      "style":  {...StyleConfig fields...},
      "h2m":    {...H2MConfig fields...},
      "eval":   {...EvalConfig fields...},
      "seeds":  [0, 1, 2],
      "mi_enabled": true,
      "adaptor_enabled": true
    }

``bottleneck_dim`` of p2h/h2m is tied to ``ssl.hidden_dim`` and
``mel_dim``/vocabulary sizes to the corpus; :meth:`ExperimentConfig.validate`
rejects configs where they disagree.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .corpus import ConfigError, CorpusConfig
from .h2m import H2MConfig
from .p2h import P2HConfig
from .ssl import SSLEncoderConfig

SYSTEMS = ("full", "no_mi", "no_adaptor")


@dataclass
class StyleConfig:
    style_dim: int = 16
    lang_dim: int = 8
    style_hidden: int = 32
    lambda_style: float = 1.0
    lambda_mi: float = 0.1
    q_steps_per_main: int = 5
    q_learning_rate: float = 5e-3
    mi_pooling: str = "utterance"


STYLE_KEYS = tuple(f.name for f in fields(StyleConfig))


@dataclass
class EvalConfig:
    requests_per_split: int = 40
    vc_pairs: list[list[int]] = field(default_factory=lambda: [[2, 3], [0, 2], [1, 0], [3, 1]])
    vc_utterances: int = 20
    speaker_probe_utterances: int = 600
    style_references: int = 20


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    ssl: SSLEncoderConfig = field(default_factory=SSLEncoderConfig)
    p2h: P2HConfig = field(default_factory=P2HConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    h2m: H2MConfig = field(default_factory=H2MConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    mi_enabled: bool = True
    adaptor_enabled: bool = True

    # -- derived views -------------------------------------------------------
    @property
    def system(self) -> str:
        if not self.adaptor_enabled:
            return "no_adaptor"
        return "full" if self.mi_enabled else "no_mi"

    def for_system(self, system: str) -> "ExperimentConfig":
        if system not in SYSTEMS:
            raise ConfigError(f"unknown system {system!r}; expected one of {SYSTEMS}")
        cfg = copy.deepcopy(self)
        cfg.mi_enabled = system == "full"
        cfg.adaptor_enabled = system != "no_adaptor"
        return cfg

    def p2h_config(self) -> P2HConfig:
        """P2H settings with the style section and mode flags folded in."""
        merged = asdict(self.p2h)
        merged.update(asdict(self.style))
        merged["mi_enabled"] = self.mi_enabled and self.adaptor_enabled
        merged["adaptor_enabled"] = self.adaptor_enabled
        if not merged["mi_enabled"]:
            merged["lambda_mi"] = 0.0
        return P2HConfig(**merged)

    def validate(self) -> "ExperimentConfig":
        try:
            self.corpus.validate()
            self.ssl.validate()
            self.h2m.validate()
            self.p2h_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for name, dim in (("p2h", self.p2h.bottleneck_dim), ("h2m", self.h2m.bottleneck_dim)):
            if dim != self.ssl.hidden_dim:
                raise ConfigError(f"{name}.bottleneck_dim={dim} must equal ssl.hidden_dim={self.ssl.hidden_dim}")
        checks = [("p2h.phoneme_vocab_size", self.p2h.phoneme_vocab_size, self.corpus.vocab_size),
                  ("p2h.num_styles", self.p2h.num_styles, self.corpus.num_styles),
                  ("p2h.mel_dim", self.p2h.mel_dim, self.corpus.mel_dim),
                  ("h2m.mel_dim", self.h2m.mel_dim, self.corpus.mel_dim),
                  ("h2m.num_speakers", self.h2m.num_speakers, self.corpus.num_speakers)]
        for key, got, want in checks:
            if got != want:
                raise ConfigError(f"{key}={got} disagrees with the corpus ({want})")
        return self

    # -- serialisation ---------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for key in STYLE_KEYS:
            d["p2h"].pop(key, None)
        for key in ("mi_enabled", "adaptor_enabled"):
            d["p2h"].pop(key, None)
        return json.loads(json.dumps(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def section_hash(self, *sections: str) -> str:
        d = self.to_dict()
        blob = json.dumps({s: d[s] for s in sections}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def hash(self) -> str:
        return self.section_hash(*self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            current = getattr(cfg, f.name)
            if dataclasses.is_dataclass(current):
                if not isinstance(value, dict):
                    raise ConfigError(f"section {f.name!r} must be an object")
                known = {g.name for g in fields(current)}
                bad = set(value) - known
                if bad:
                    raise ConfigError(f"unknown keys in {f.name!r}: {sorted(bad)}")
                for key, item in value.items():
                    if isinstance(getattr(current, key), tuple):
                        value[key] = tuple(item)
                setattr(cfg, f.name, dataclasses.replace(current, **value))
            else:
                setattr(cfg, f.name, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    data = cfg.to_dict()
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {text!r}: no section {part!r}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"override {text!r}: unknown key {'.'.join(path)!r}")
        node[path[-1]] = value
    return ExperimentConfig.from_dict(data)
