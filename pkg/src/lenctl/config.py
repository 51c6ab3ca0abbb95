"""INI run configuration.

Every section maps onto a dataclass; keys are the dataclass field names.
Unknown sections or keys are errors, omitted keys take the dataclass default.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .infer import InferenceConfig
from .ppo import PPOConfig
from .sft import SftConfig
from .spe import ExtractorConfig
from .templates import SyntheticCorpusParams

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TemplatesConfig:
    path: str = ""
    split_seed: int = 0
    holdout_fraction: float = 0.3


@dataclass
class ModelSizes:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    max_context: int = 512
    anchor: int = 127
    seed: int = 0


@dataclass
class EvalConfig:
    seed: int = 1234
    n_docs: int = 200
    n_val_docs: int = 50
    seeds: str = "0,1,2"
    n_candidates: int = 8

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]


@dataclass
class PathsConfig:
    workdir: str = "lenctl-work"
    corpus: str = ""


@dataclass
class RunConfig:
    corpus: SyntheticCorpusParams = field(default_factory=SyntheticCorpusParams)
    templates: TemplatesConfig = field(default_factory=TemplatesConfig)
    model: ModelSizes = field(default_factory=ModelSizes)
    spe: ExtractorConfig = field(default_factory=ExtractorConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["meta"] = {"version": str(CONFIG_VERSION)}
        for f in fields(self):
            section = getattr(self, f.name)
            cp[f.name] = {k.name: _fmt(getattr(section, k.name)) for k in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self, *sections: str) -> str:
        """Stable hash of the named sections (all when none given)."""
        names = sections or tuple(f.name for f in fields(self))
        blob = json.dumps({n: dataclasses.asdict(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple:
            args = typing.get_args(typ)
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(a(p) for a, p in zip(args, parts))
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _apply(section_obj, items: dict[str, str], name: str):
    hints = typing.get_type_hints(type(section_obj))
    known = {f.name for f in fields(section_obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _parse(raw, hints[key], f"[{name}] {key}")
    try:
        return dataclasses.replace(section_obj, **updates)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{name}] {e}") from None


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive field names
    try:
        if text is not None:
            cp.read_string(text)
        else:
            with open(path) as f:
                cp.read_file(f)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    names = {f.name for f in fields(cfg)}
    updates = {}
    for section in cp.sections():
        if section == "meta":
            version = cp["meta"].get("version", str(CONFIG_VERSION))
            if version != str(CONFIG_VERSION):
                raise ConfigError(f"unsupported config version {version}")
            continue
        if section not in names:
            raise ConfigError(f"unknown section [{section}]")
        updates[section] = _apply(getattr(cfg, section), dict(cp[section]), section)
    return dataclasses.replace(cfg, **updates)
