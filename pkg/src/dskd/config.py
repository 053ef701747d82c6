"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Unknown keys are errors. Lists
are comma-separated; stage lists use ``channels:convs[:d]`` entries, where
``d`` marks a stride-2 first convolution.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from .losses import DistillConfig
from .models import parse_stages
from .optim import OptimSpec

METHODS = ("student_only", "kd", "dsn", "dskd")


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    method: str = "dskd"
    teacher_arch: str = "16:1,32:1:d,64:1:d"
    student_arch: str = "8:1,16:1:d,16:1:d"
    # dataset: synthetic unless train_path is set
    num_classes: int = 10
    per_class: int = 100
    image_size: int = 16
    data_seed: int = 0
    noise: float = 0.6
    colour_shift: float = 0.1
    train_path: str = ""
    test_path: str = ""
    # losses
    alpha: float = 1.0
    beta: float = 30.0
    temperature: float = 4.0
    enable_shallow_kd: bool = True
    enable_fea: bool = True
    enable_shallow_fea: bool = True
    adaptive_weights: bool = True
    kd_grad_scale: float = 1.0
    fea_normalize: bool = True  # feature MSE in units of the teacher's mean-square feature
    shallow_positions: Optional[Tuple[int, ...]] = None  # None: every stage 1..L-1
    # optimisation
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: Tuple[int, ...] = (30, 45, 55)
    decay_factor: float = 0.1
    grad_clip: float = 5.0  # global gradient norm cap; 0 disables
    epochs: int = 60
    teacher_epochs: int = 60
    batch_size: int = 64
    seeds: Tuple[int, ...] = (0, 1, 2)
    teacher_seed: int = 100
    teacher_checkpoint: str = ""
    export_weights: bool = True
    workers: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    # -------------------------------------------------------------- derived views

    @property
    def teacher_stages(self):
        return parse_stages(self.teacher_arch)

    @property
    def student_stages(self):
        return parse_stages(self.student_arch)

    @property
    def optim(self) -> OptimSpec:
        return OptimSpec(self.lr0, self.momentum, self.weight_decay, tuple(self.milestones), self.decay_factor,
                         self.grad_clip or None)

    @property
    def distill(self) -> DistillConfig:
        """Loss switches for this method; every method is DSKD with some terms off."""
        base = dict(
            alpha=self.alpha, beta=self.beta, temperature=self.temperature,
            enable_shallow_kd=self.enable_shallow_kd, enable_fea=self.enable_fea,
            enable_shallow_fea=self.enable_shallow_fea, adaptive_weights=self.adaptive_weights,
            kd_grad_scale=self.kd_grad_scale,
        )
        if self.method == "student_only":
            base.update(alpha=0.0, beta=0.0, enable_shallow_kd=False, enable_fea=False,
                        enable_shallow_fea=False)
        elif self.method == "kd":
            base.update(enable_shallow_kd=False, enable_fea=False, enable_shallow_fea=False, beta=0.0)
        elif self.method == "dsn":
            base.update(beta=0.0, enable_fea=False, enable_shallow_fea=False, enable_shallow_kd=True,
                        adaptive_weights=False, shallow_labels=True)
        return DistillConfig(**base)

    @property
    def needs_teacher(self) -> bool:
        d = self.distill
        return not d.shallow_labels and (d.alpha > 0 or (d.beta > 0 and d.enable_fea))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -------------------------------------------------------------- validation

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}, got {self.method!r}")
        for name in ("teacher_arch", "student_arch"):
            try:
                parse_stages(getattr(self, name))
            except ValueError as e:
                raise ConfigError(name, str(e)) from None
        for name in ("num_classes",):
            if getattr(self, name) < 2:
                raise ConfigError(name, "must be >= 2")
        if self.image_size < 8:
            raise ConfigError("image_size", "must be >= 8")
        if self.per_class < 5:
            raise ConfigError("per_class", "must be >= 5")
        if not self.temperature > 0:
            raise ConfigError("temperature", f"must be positive, got {self.temperature}")
        for name in ("alpha", "beta", "weight_decay", "noise", "colour_shift", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be nonnegative, got {getattr(self, name)}")
        if not self.lr0 > 0:
            raise ConfigError("lr0", "must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if not self.decay_factor > 0:
            raise ConfigError("decay_factor", "must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones", "must be strictly increasing")
        for name in ("epochs", "teacher_epochs", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "seeds must be distinct")
        L = len(self.student_stages)
        if self.shallow_positions is not None:
            bad = [p for p in self.shallow_positions if not 1 <= p < L]
            if bad:
                raise ConfigError("shallow_positions", f"positions must lie in 1..{L - 1}, got {bad}")
        if bool(self.train_path) != bool(self.test_path):
            raise ConfigError("test_path" if self.train_path else "train_path",
                              "train_path and test_path must be given together")

    # -------------------------------------------------------------- text format

    def to_text(self) -> str:
        lines = ["# resolved experiment configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def _format_value(v) -> str:
    if v is None:
        return "all"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v) if v else "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_bool(key: str, text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {text!r}")


def _parse_int_tuple(key: str, text: str) -> Tuple[int, ...]:
    t = text.strip()
    if t.lower() in ("", "none"):
        return ()
    try:
        return tuple(int(p) for p in t.split(",") if p.strip())
    except ValueError:
        raise ConfigError(key, f"expected comma-separated integers, got {text!r}") from None


def coerce(key: str, text: str):
    """Convert a raw string to the type of config field ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(key, "unknown configuration key")
    typ = str(_FIELD_TYPES[key])
    try:
        if typ == "bool":
            return _parse_bool(key, text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if key == "shallow_positions":
            return None if text.strip().lower() == "all" else _parse_int_tuple(key, text)
        if typ.startswith("Tuple"):
            return _parse_int_tuple(key, text)
        return text.strip()
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(key, f"cannot parse {text!r} as {typ}") from None


def parse_text(text: str) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        values[key] = coerce(key, raw)
    return values


def parse_config(path=None, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Load a config file (optional) and apply string overrides, then validate."""
    values: Dict[str, object] = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text()))
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**values)


def config_keys():
    return list(_FIELD_TYPES)
