"""INI experiment files: [data], [model], [train], [moe], [graph].

Every ModelConfig / TrainSpec / MoEConfig field is addressed by its own name;
graph-learner fields of ModelConfig live under [graph].  Unknown sections or
keys are rejected, and all missing required keys are reported together.
Defaults are the dataclass defaults; ``dump_config`` writes every key.
"""

from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import dataclass, field, fields

from .model import ModelConfig
from .moe import MoEConfig
from .training import TrainSpec

GRAPH_KEYS = ("tau", "tau_final", "graph_logits", "use_edge_bias")
REQUIRED = {
    "data": ("files",),
    "model": ("lookback", "patch_len", "d_model", "n_heads", "n_layers"),
}


@dataclass(frozen=True)
class DataConfig:
    files: tuple[str, ...] = ()
    split: str = "standard"  # standard (70/10/20) or fewshot (first 20% / last 20%)
    finetune_mode: str = "cm"

    def __post_init__(self):
        if self.split not in ("standard", "fewshot"):
            raise ValueError(f"data.split must be 'standard' or 'fewshot', got {self.split!r}")
        if self.finetune_mode not in ("ci", "cm"):
            raise ValueError(f"data.finetune_mode must be 'ci' or 'cm', got {self.finetune_mode!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSpec = field(default_factory=TrainSpec)


class ConfigError(ValueError):
    pass


def _section_fields(section: str):
    if section == "data":
        return [f for f in fields(DataConfig)]
    if section == "train":
        return [f for f in fields(TrainSpec)]
    if section == "moe":
        return [f for f in fields(MoEConfig)]
    model = [f for f in fields(ModelConfig) if f.name != "moe"]
    if section == "graph":
        return [f for f in model if f.name in GRAPH_KEYS]
    return [f for f in model if f.name not in GRAPH_KEYS]


SECTIONS = ("data", "model", "train", "moe", "graph")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _owner(section: str):
    return {"data": DataConfig, "train": TrainSpec, "moe": MoEConfig}.get(section, ModelConfig)


def _parse_value(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("", "none") and len(inner) < len(args):
            return None
        return _parse_value(text, inner[0], key)
    if origin is tuple:
        if not text:
            return ()
        return tuple(_parse_value(part, args[0], key) for part in text.split(","))
    if hint is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if hint is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if hint is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, require: dict[str, tuple[str, ...]] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    require = REQUIRED if require is None else require
    problems, missing = [], []
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        owner = _owner(section)
        hints = _hints(owner)
        known = {f.name for f in _section_fields(section)}
        for key, raw in parser.items(section):
            if key not in known:
                problems.append(f"unknown key {section}.{key}")
                continue
            try:
                values[section][key] = _parse_value(raw, hints[key], f"{section}.{key}")
            except ConfigError as exc:
                problems.append(str(exc))
    for section, keys in require.items():
        for key in keys:
            if key not in values[section]:
                missing.append(f"{section}.{key}")
    if missing:
        problems.insert(0, "missing required keys: " + ", ".join(missing))
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        moe = MoEConfig(**values["moe"])
        model = ModelConfig(moe=moe, **values["model"], **values["graph"])
        return ExperimentConfig(data=DataConfig(**values["data"]), model=model, train=TrainSpec(**values["train"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, require: dict[str, tuple[str, ...]] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), require)


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key of every section, in a form ``parse_config`` reads back identically."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    sources = {"data": cfg.data, "model": cfg.model, "train": cfg.train, "moe": cfg.model.moe, "graph": cfg.model}
    for section in SECTIONS:
        parser.add_section(section)
        for f in _section_fields(section):
            parser.set(section, f.name, _format_value(getattr(sources[section], f.name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
