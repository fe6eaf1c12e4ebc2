"""Project configuration: one TOML file validated in full before any command runs.

Example::

    seed = 0

    [paths]
    target_dir = "corpus/target"
    external_dir = "corpus/external"
    workdir = "work"

    [extractor]
    kind = "mock"
    dim = 256

    [generator]
    hidden_dim = 256

    [training]
    steps = 20000

Relative paths resolve against the config file's directory.  Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import ast
import dataclasses
from pathlib import Path
from typing import Any

import tomli

from .discriminators import EmbeddingDiscriminatorConfig, MelDiscriminatorConfig
from .dsp import AUGMENT_RATES
from .errors import ConfigError
from .model import GeneratorConfig
from .ssl_frontend import ExtractorSpec
from .training import TrainingConfig


@dataclasses.dataclass
class PathsConfig:
    target_dir: str = "target"
    external_dir: str = "external"
    workdir: str = "work"


@dataclasses.dataclass
class DataConfig:
    split_ratio: float = 0.9
    target_speaker: str = "target"
    rates: tuple = AUGMENT_RATES
    workers: int = 1

    def __post_init__(self):
        self.rates = tuple(float(r) for r in self.rates)
        if not 0 < self.split_ratio <= 1:
            raise ConfigError("data.split_ratio must be in (0, 1]")
        if any(not 0.8 <= r <= 1.2 for r in self.rates):
            raise ConfigError("data.rates must lie in [0.8, 1.2]")
        if 1.0 not in self.rates:
            raise ConfigError("data.rates must include the original rate 1.0")


@dataclasses.dataclass
class EvalConfig:
    embedder: str = "fallback_stats"
    embedder_dim: int = 160
    embedder_command: str | None = None
    vocoder: str = "griffin_lim"
    vocoder_command: str | None = None
    griffin_lim_iterations: int = 64
    perplexity: float = 30.0
    probe_summary: str = "moments"

    def __post_init__(self):
        if self.vocoder not in ("griffin_lim", "external_command"):
            raise ConfigError("eval.vocoder must be 'griffin_lim' or 'external_command'")
        if self.vocoder == "external_command" and not self.vocoder_command:
            raise ConfigError("eval.vocoder_command is required for the external vocoder")
        if self.embedder not in ("fallback_stats", "external_command"):
            raise ConfigError("eval.embedder must be 'fallback_stats' or 'external_command'")
        if self.embedder == "external_command" and not self.embedder_command:
            raise ConfigError("eval.embedder_command is required for the external embedder")


_SECTIONS = {
    "paths": PathsConfig,
    "data": DataConfig,
    "extractor": ExtractorSpec,
    "generator": GeneratorConfig,
    "mel_discriminator": MelDiscriminatorConfig,
    "embedding_discriminator": EmbeddingDiscriminatorConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
}


@dataclasses.dataclass
class ProjectConfig:
    paths: PathsConfig
    data: DataConfig
    extractor: ExtractorSpec
    generator: GeneratorConfig
    mel_discriminator: MelDiscriminatorConfig
    embedding_discriminator: EmbeddingDiscriminatorConfig
    training: TrainingConfig
    eval: EvalConfig
    seed: int = 0
    base_dir: Path = Path(".")

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def workdir(self) -> Path:
        return self.path("workdir")

    def to_dict(self) -> dict:
        d = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        d["seed"] = self.seed
        return d


def _build(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(raw: dict, base_dir=".") -> ProjectConfig:
    raw = dict(raw)
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    for name, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name, {}))
        if name == "training":
            values.setdefault("seed", seed)
        if name == "generator" and "extractor" in raw:
            values.setdefault("input_dim", raw["extractor"].get("dim", ExtractorSpec.dim))
        if name == "mel_discriminator":
            values.setdefault("n_mels", sections["generator"].n_mels)
        if name == "embedding_discriminator":
            values.setdefault("input_dim", sections["generator"].hidden_dim)
        for key in ("channels", "betas", "rates"):
            if key in values:
                values[key] = tuple(values[key])
        sections[name] = _build(cls, name, values)

    cfg = ProjectConfig(**sections, seed=seed, base_dir=Path(base_dir))
    if cfg.generator.input_dim != cfg.extractor.dim:
        raise ConfigError(f"generator.input_dim ({cfg.generator.input_dim}) != extractor.dim ({cfg.extractor.dim})")
    if cfg.embedding_discriminator.input_dim != cfg.generator.hidden_dim:
        raise ConfigError("embedding_discriminator.input_dim must equal generator.hidden_dim")
    if cfg.mel_discriminator.n_mels != cfg.generator.n_mels:
        raise ConfigError("mel_discriminator.n_mels must equal generator.n_mels")
    return cfg


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` -> (["section", "key"], python value)."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        parsed = ast.literal_eval(value)
    except (ValueError, SyntaxError):
        parsed = value
    return key.strip().split("."), parsed


def load_config(path, overrides=()) -> ProjectConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        keys, value = parse_override(item)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return from_dict(raw, base_dir=path.parent)
