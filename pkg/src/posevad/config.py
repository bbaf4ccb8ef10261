"""Run configuration: one JSON file with a section per component, plus overrides."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import ConfigError, SynthConfig
from .fusion import FusionWeights
from .pipeline import (
    ABLATION_D,
    ABLATION_T,
    CorpusConfig,
    ModelConfig,
    OptimConfig,
    PipelineConfig,
    config_to_dict,
)


@dataclass(frozen=True)
class DataConfig:
    """Explicit dataset directories; empty means ``<out>/data/{train,test}``."""

    train_dir: str = ""
    test_dir: str = ""


@dataclass(frozen=True)
class GridConfig:
    lo: float = 0.0
    hi: float = 3.0
    step: float = 0.1


@dataclass(frozen=True)
class AblationConfig:
    T_values: tuple[int, ...] = ABLATION_T
    d_values: tuple[int, ...] = ABLATION_D


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    weights: FusionWeights = field(default_factory=FusionWeights)
    grid: GridConfig = field(default_factory=GridConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.model, self.optim, self.corpus, self.weights, self.seed)

    def to_dict(self) -> dict:
        return config_to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


SECTIONS = {"synth": SynthConfig, "data": DataConfig, "model": ModelConfig, "optim": OptimConfig,
            "corpus": CorpusConfig, "weights": FusionWeights, "grid": GridConfig,
            "ablation": AblationConfig}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(_coerce(section, key, v, default[0]) for v in value) if default else tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _build_section(section: str, values: dict) -> Any:
    cls = SECTIONS[section]
    base = cls()
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(section, k, v, getattr(base, k)) for k, v in values.items()}
    try:
        return replace(base, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is read as JSON, falling back to a plain string."""
    name, sep, raw = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def build_config(raw: dict | None = None, overrides: Sequence[str] = (),
                 seed: int | None = None) -> RunConfig:
    """Merge file values, ``--set`` overrides and ``--seed`` (later wins)."""
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    sections = {s: dict(raw.get(s) or {}) for s in SECTIONS}
    top_seed = raw.get("seed", 0)
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        sections[section][key] = value
    if seed is not None:
        top_seed = seed
    if isinstance(top_seed, bool) or not isinstance(top_seed, int) or top_seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {top_seed!r}")
    # the dataset follows the run seed unless the synth section pins its own
    if "seed" not in sections["synth"] or seed is not None:
        sections["synth"]["seed"] = top_seed
    built = {s: _build_section(s, v) for s, v in sections.items()}
    cfg = RunConfig(seed=top_seed, **built)
    cfg.synth.validate()
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    m, o, c = cfg.model, cfg.optim, cfg.corpus
    for name in ("T", "hidden_dim", "latent_dim", "embed_dim", "classifier_hidden", "pp_stride"):
        if getattr(m, name) <= 0:
            raise ConfigError(f"model.{name} must be positive")
    if m.T < 3:
        raise ConfigError("model.T must be at least 3")
    if m.kl_weight < 0:
        raise ConfigError("model.kl_weight must be >= 0")
    if o.lr <= 0 or o.batch_size <= 0 or o.clip_norm <= 0:
        raise ConfigError("optim.lr, optim.batch_size and optim.clip_norm must be positive")
    if min(o.epochs_pr, o.epochs_pp, o.epochs_rd) <= 0:
        raise ConfigError("epochs must be positive")
    if c.n_windows < 2 or not 0 < c.positive_fraction < 1 or c.noise < 0:
        raise ConfigError("corpus needs n_windows >= 2, 0 < positive_fraction < 1, noise >= 0")
    if len(c.loop_range) != 2 or not 2 <= c.loop_range[0] <= c.loop_range[1]:
        raise ConfigError("corpus.loop_range must be [lo, hi] with 2 <= lo <= hi")
    g = cfg.grid
    if g.step <= 0 or g.hi < g.lo or g.lo < 0:
        raise ConfigError("grid needs 0 <= lo <= hi and step > 0")
    if not cfg.ablation.T_values or any(T < 3 for T in cfg.ablation.T_values):
        raise ConfigError("ablation.T_values must be non-empty with every T >= 3")
    if not cfg.ablation.d_values or any(d not in (2, 3) for d in cfg.ablation.d_values):
        raise ConfigError("ablation.d_values must be a non-empty subset of {2, 3}")


def load_config(path: str | Path | None, overrides: Sequence[str] = (),
                seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_config(raw, overrides, seed)
