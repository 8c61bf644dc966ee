"""Experiment configuration: ``key = value`` files with optional ``[section]`` headers.

Keys before any header belong to the global section or, failing that, to the
section of the command being run. Unknown keys are rejected. CLI overrides
win over file values.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synth import ConfigError
from .train import TrainConfig

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "STEREODERAIN_OUT_ROOT"


@dataclass
class GlobalConfig:
    seed: int = 0
    out: str = "runs"
    deterministic: bool = False


@dataclass
class SynthParams:
    out: str = ""
    count: int = 8
    seed: int = 0
    size: str = "128x128"
    classes: int = 8
    streaks: str = "20..60"
    focal_length_px: float = 100.0
    baseline: float = 1.0

    def dims(self):
        try:
            h, w = (int(v) for v in self.size.lower().split("x"))
        except ValueError as e:
            raise ConfigError(f"size must look like HxW, got {self.size!r}") from e
        return h, w

    def streak_range(self):
        try:
            lo, hi = (int(v) for v in self.streaks.split(".."))
        except ValueError as e:
            raise ConfigError(f"streaks must look like A..B, got {self.streaks!r}") from e
        return lo, hi


@dataclass
class EvalParams:
    checkpoint: str = ""
    data: str = ""
    tag: str = "model"
    segmenter: str = ""


@dataclass
class InferParams:
    checkpoint: str = ""
    left: str = ""
    right: str = ""
    labels_left: str = ""
    labels_right: str = ""
    segmenter: str = ""
    segmaps: bool = False


@dataclass
class ExperimentConfig:
    globals: GlobalConfig = field(default_factory=GlobalConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalParams = field(default_factory=EvalParams)
    infer: InferParams = field(default_factory=InferParams)

    SECTIONS = ("globals", "synth", "train", "eval", "infer")

    def validate(self):
        self.train.validate()
        if self.synth.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.synth.classes}")
        h, w = self.synth.dims()
        if h % 16 or w % 16:
            raise ConfigError(f"image size {h}x{w} must be divisible by 16")
        lo, hi = self.synth.streak_range()
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad streak range {lo}..{hi}")
        if self.synth.count < 0:
            raise ConfigError("count must be >= 0")
        return self

    def to_text(self):
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def out_dir(self):
        out = Path(self.globals.out)
        root = os.environ.get(OUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(section, key, raw):
    ftype = {f.name: f.type for f in fields(section)}[key]
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from e
    return raw


def _has_key(section, key):
    return key in {f.name for f in fields(section)}


def parse_config_text(text, command):
    """Return ``{section: {key: raw value}}``; unheaded keys go to globals or ``command``."""
    parsed = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ExperimentConfig.SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        target = section
        if target is None:
            if _has_key(GlobalConfig(), key):
                target = "globals"
            elif command in ExperimentConfig.SECTIONS and _has_key(getattr(ExperimentConfig(), command), key):
                target = command
            else:
                raise ConfigError(f"unknown config key {key!r}")
        parsed.setdefault(target, {})[key] = value
    return parsed


def resolve_config(path=None, overrides=None, command="train"):
    """Defaults, then file values, then CLI ``overrides`` (``{section: {key: value}}``)."""
    cfg = ExperimentConfig()
    file_values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        file_values = parse_config_text(text, command)
    for name, values in file_values.items():
        section = getattr(cfg, name)
        for key, raw in values.items():
            if not _has_key(section, key):
                raise ConfigError(f"unknown config key {key!r} in [{name}]")
            setattr(cfg, name, dataclasses.replace(getattr(cfg, name), **{key: _coerce(section, key, raw)}))
            section = getattr(cfg, name)
    for name, values in (overrides or {}).items():
        section = getattr(cfg, name)
        for key, value in values.items():
            if value is None:
                continue
            if not _has_key(section, key):
                raise ConfigError(f"unknown config key {key!r} in [{name}]")
            if key in file_values.get(name, {}):
                log.info("CLI overrides %s.%s: %s -> %s", name, key, file_values[name][key], value)
            if isinstance(value, str):
                value = _coerce(section, key, value)
            setattr(cfg, name, dataclasses.replace(section, **{key: value}))
            section = getattr(cfg, name)
    return cfg.validate()


def write_resolved(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(cfg.to_text())
