"""Run configuration: ``section.key = value`` lines mapped onto module configs."""

from __future__ import annotations

import ast
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from ..acp import AcpConfig
from ..evalsuite import EvalConfig
from ..icd import IcdConfig
from ..quality import LossWeights, ScoringConfig
from ..selection import SelectionConfig
from ..simharness import NoiseModel, WorldConfig
from .formats import FormatError

SEED_ENV = "APL_SEED"


class ConfigError(FormatError):
    pass


@dataclass(frozen=True)
class RunOptions:
    # fixed_tau_pos < 0 selects the dynamic threshold
    fixed_tau_pos: float = -1.0
    workers: int = 1
    ablation_seeds: int = 10


@dataclass(frozen=True)
class RunConfig:
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    icd: IcdConfig = field(default_factory=IcdConfig)
    acp: AcpConfig = field(default_factory=AcpConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    loss: LossWeights = field(default_factory=LossWeights)
    run: RunOptions = field(default_factory=RunOptions)


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _parse_value(text: str) -> Any:
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{where}: expected true or false")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number")
    if isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"{where}: expected a list")
    if isinstance(default, str):
        return str(value)
    return value


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    updates: dict[str, dict[str, Any]] = {}
    defaults = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        name, value = (s.strip() for s in line.split("=", 1))
        if name.count(".") != 1:
            raise ConfigError(f"{where}: key {name!r} is not of the form section.key")
        section, key = name.split(".")
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r}")
        target = getattr(defaults, section)
        if key not in {f.name for f in fields(target)}:
            raise ConfigError(f"{where}: unknown key {name!r}")
        if key in updates.get(section, {}):
            raise ConfigError(f"{where}: {name!r} set twice")
        updates.setdefault(section, {})[key] = _coerce(_parse_value(value), getattr(target, key), f"{where}: {name}")
    return build_config(updates, source)


def build_config(updates: Mapping[str, Mapping[str, Any]], source: str = "<config>") -> RunConfig:
    defaults = RunConfig()
    parts = {}
    for section in SECTIONS:
        try:
            parts[section] = replace(getattr(defaults, section), **dict(updates.get(section, {})))
        except ValueError as e:
            raise ConfigError(f"{source}: [{section}] {e}") from e
    return RunConfig(**parts)


def apply_seed_override(cfg: RunConfig, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Replace every section seed with ``APL_SEED`` when it is set."""
    env = os.environ if environ is None else environ
    text = env.get(SEED_ENV)
    if text is None or text == "":
        return cfg
    try:
        seed = int(text)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV}={text!r} is not an integer") from e
    parts = {}
    for section in SECTIONS:
        part = getattr(cfg, section)
        parts[section] = replace(part, seed=seed) if "seed" in {f.name for f in fields(part)} else part
    return RunConfig(**parts)


def load_config(path: Optional[str | Path] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: no such file")
        cfg = parse_config(p.read_text(encoding="utf-8"), str(p))
    return apply_seed_override(cfg, environ)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for section in SECTIONS:
        part = getattr(cfg, section)
        out[section] = {f.name: (list(v) if isinstance(v := getattr(part, f.name), tuple) else v)
                        for f in fields(part)}
    return out
