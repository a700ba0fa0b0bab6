"""Run configuration and its plain-text file format.

The file is INI-style: top-level run fields live in ``[run]``, nested groups in
their own sections::

    [run]
    mode = sastc
    T = 3
    feature_pairs = 0:1, 1:2

    [optim]
    lr = 0.05

On the command line the same fields are addressed as ``T=3`` or ``optim.lr=0.1``.
Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from .models import DEFAULT_STUDENT, DEFAULT_TEACHER
from .neuron import LifParams

MODES = ("baseline", "kd", "feature_kd", "sastc")


class ConfigError(ValueError):
    """Raised with the offending dotted key path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class OptimConfig:
    kind: str = "sgd-momentum"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    clip_norm: float = 1.0  # global gradient-norm clip for distillation; 0 disables


@dataclass
class TeacherConfig:
    arch: str = DEFAULT_TEACHER
    epochs: int = 20
    lr: float = 0.05
    batch: int = 32
    checkpoint: str = ""


@dataclass
class StudentConfig:
    arch: str = DEFAULT_STUDENT
    # std of each spiking layer's input current after data-dependent init on one training batch; 0 keeps the raw draw
    init_std: float = 0.5


@dataclass
class QKConfig:
    d_h: int = 64
    d_k: int = 32
    per_layer: bool = False
    zero_init_query: bool = True
    zero_init_projector: bool = True


@dataclass
class DataConfig:
    source: str = "synth"  # synth | idx | raw-tensor
    classes: int = 3
    train_per_class: int = 200
    test_per_class: int = 100
    size: int = 16
    channels: int = 3
    noise_std: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class SeedConfig:
    init: int = 0
    data: int = 0
    noise: int = 0
    teacher: int = 0


@dataclass
class RunConfig:
    mode: str = "sastc"
    T: int = 3
    b: int = 64
    epochs: int = 40
    alpha: float = 1.0
    beta: float = 1.0
    label_noise: float = 0.0
    feature_pairs: list = field(default_factory=list)  # [(s_l, a_l), ...], tap ordinals
    stm_pairs: list = field(default_factory=list)  # empty -> last min(s_L, a_L) in depth order
    stm_window: int = 10
    eval_every: int = 10
    eval_batch: int = 100
    loss_reduction: str = "mean"
    similarity_space_loss: bool = False
    dtype: str = "f64"
    log_mode: str = "strict"
    dump_diagnostics: bool = False
    keep_training_modules: bool = False
    retrain_teacher_on_noise: bool = False
    out_dir: str = ""
    optim: OptimConfig = field(default_factory=OptimConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    lif: LifParams = field(default_factory=LifParams)
    qk: QKConfig = field(default_factory=QKConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.T < 1:
            raise ConfigError("T", f"must be >= 1, got {self.T}")
        if self.b < 2:
            raise ConfigError("b", f"must be >= 2 (similarity matrices degenerate at b=1), got {self.b}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.teacher.batch < 1 or self.teacher.epochs < 1:
            raise ConfigError("teacher.batch", "teacher batch size and epochs must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha", f"must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError("beta", f"must be >= 0, got {self.beta}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError("label_noise", f"must lie in [0, 1], got {self.label_noise}")
        if self.mode == "feature_kd" and not self.feature_pairs:
            raise ConfigError("feature_pairs", "feature_kd mode needs an explicit (s_l, a_l) pairing list")
        if self.student.init_std < 0:
            raise ConfigError("student.init_std", f"must be >= 0, got {self.student.init_std}")
        if self.stm_window < 1:
            raise ConfigError("stm_window", "must be >= 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction", "must be 'mean' or 'sum'")
        if self.dtype not in ("f64", "f32"):
            raise ConfigError("dtype", "must be 'f64' or 'f32'")
        if self.log_mode not in ("strict", "lenient"):
            raise ConfigError("log_mode", "must be 'strict' or 'lenient'")
        if self.optim.kind not in ("sgd-momentum", "adam"):
            raise ConfigError("optim.kind", f"unknown optimizer {self.optim.kind!r}")
        if self.data.source not in ("synth", "idx", "raw-tensor"):
            raise ConfigError("data.source", f"unknown source {self.data.source!r}")
        return self


_SECTIONS = {f.name for f in fields(RunConfig) if dataclasses.is_dataclass(f.default_factory)}


def _section_type(name: str):
    return get_type_hints(RunConfig)[name]


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for tok in text.replace(";", ",").split(","):
        tok = tok.strip()
        if not tok:
            continue
        s, sep, a = tok.partition(":")
        if not sep:
            raise ValueError(f"pair {tok!r} must be written s:a")
        pairs.append((int(s), int(a)))
    return pairs


def _coerce(kind, text: str) -> Any:
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is list:
        return _parse_pairs(text)
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(f"{s}:{a}" for s, a in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_types(cls) -> dict[str, type]:
    hints = get_type_hints(cls)
    out = {}
    for f in fields(cls):
        hint = hints[f.name]
        out[f.name] = list if getattr(hint, "__origin__", hint) is list else hint
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, str] | list[str]) -> RunConfig:
    """Return a copy with ``key=value`` overrides applied (``T`` or ``optim.lr`` style keys)."""
    if isinstance(overrides, list):
        pairs = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like key=value")
            pairs[key.strip()] = value
        overrides = pairs
    top = dataclasses.asdict(cfg)
    values: dict[str, Any] = {k: v for k, v in top.items() if k not in _SECTIONS}
    sections = {name: dict(top[name]) for name in _SECTIONS}
    run_types = _field_types(RunConfig)
    for key, raw in overrides.items():
        section, dot, name = key.partition(".")
        try:
            if dot:
                if section not in _SECTIONS:
                    raise ConfigError(key, "unknown config section")
                types = _field_types(_section_type(section))
                if name not in types:
                    raise ConfigError(key, "unknown config key")
                sections[section][name] = _coerce(types[name], raw)
            else:
                if key in _SECTIONS or key not in run_types:
                    raise ConfigError(key, "unknown config key")
                values[key] = _coerce(run_types[key], raw)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(key, str(exc)) from exc
    return _build(values, sections)


def _build(values: dict, sections: dict) -> RunConfig:
    kwargs = dict(values)
    kwargs["feature_pairs"] = [tuple(p) for p in kwargs.get("feature_pairs", [])]
    kwargs["stm_pairs"] = [tuple(p) for p in kwargs.get("stm_pairs", [])]
    for name, vals in sections.items():
        try:
            kwargs[name] = _section_type(name)(**vals)
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from exc
    return RunConfig(**kwargs)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    overrides = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            overrides[key if section == "run" else f"{section}.{key}"] = value
        if section != "run" and section not in _SECTIONS:
            raise ConfigError(section, "unknown config section")
    return apply_overrides(RunConfig(), overrides)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    top = dataclasses.asdict(cfg)
    parser["run"] = {k: _render(v) for k, v in top.items() if k not in _SECTIONS}
    for name in sorted(_SECTIONS):
        parser[name] = {k: _render(v) for k, v in top[name].items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
