"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected with the
offending line number. Command-line flags override file values, and every run
writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError
from .nn import ArchSpec, TEACHER_WIDTHS
from .train import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _opt_float(text: str) -> Optional[float]:
    text = text.strip()
    return None if text.lower() in ("", "auto", "none") else float(text)


def _opt_str(text: str) -> Optional[str]:
    text = text.strip()
    return text or None


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    out: str = "runs/default"
    dataset: str = "cifar10"
    data_dir: str = "data/cifar-10-batches-bin"
    classes: Tuple[int, ...] = ()
    n_train_per_class: int = 0
    n_test_per_class: int = 0
    image_size: int = 32
    synthetic_classes: int = 4
    sigma: float = 0.1
    standardize: bool = True
    batch_size: int = 128
    base_lr: float = 0.1
    lr_decay_iters: Tuple[int, ...] = (40_000, 60_000)
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    total_iters: int = 80_000
    eval_every: int = 500
    log_every: int = 10
    augment: bool = True
    record_wall_time: bool = False
    teacher_widths: Tuple[int, ...] = TEACHER_WIDTHS
    teacher_blocks: int = 3
    variant: int = 1
    recurs: int = 3
    lam: Optional[float] = None
    teacher: Optional[str] = None
    checkpoint: Optional[str] = None

    # config-file spelling -> attribute
    ALIASES = {"lambda": "lam"}

    @classmethod
    def _converters(cls) -> Dict[str, Any]:
        conv = {}
        for f in fields(cls):
            default = f.default
            if f.name in ("lam",):
                conv[f.name] = _opt_float
            elif f.name in ("teacher", "checkpoint"):
                conv[f.name] = _opt_str
            elif isinstance(default, bool):
                conv[f.name] = _bool
            elif isinstance(default, tuple):
                conv[f.name] = _ints
            elif isinstance(default, int):
                conv[f.name] = int
            elif isinstance(default, float):
                conv[f.name] = float
            else:
                conv[f.name] = str
        return conv

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> Dict[str, Any]:
        """Parse file text into ``{attribute: typed value}``."""
        conv = cls._converters()
        values: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            attr = cls.ALIASES.get(key, key)
            if attr not in conv:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[attr] = conv[attr](value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        return values

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        values: Dict[str, Any] = {}
        if path is not None:
            try:
                with open(path) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            values.update(cls.parse(text, path))
        for key, val in (overrides or {}).items():
            if val is not None:
                values[cls.ALIASES.get(key, key)] = val
        try:
            cfg = cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self):
        if self.dataset not in ("cifar10", "synthetic"):
            raise ConfigError(f"dataset must be 'cifar10' or 'synthetic', got {self.dataset!r}")
        if self.variant not in (1, 2, 3):
            raise ConfigError(f"variant must be 1, 2 or 3, got {self.variant}")
        if self.recurs < 1:
            raise ConfigError(f"recurs must be >= 1, got {self.recurs}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        self.train_config()

    def dumps(self) -> str:
        inverse = {v: k for k, v in self.ALIASES.items()}
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                text = ",".join(str(v) for v in val)
            elif val is None:
                text = "auto" if f.name == "lam" else ""
            elif isinstance(val, bool):
                text = "true" if val else "false"
            else:
                text = repr(val) if isinstance(val, float) else str(val)
            lines.append(f"{inverse.get(f.name, f.name)} = {text}")
        return "\n".join(lines) + "\n"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, base_lr=self.base_lr, lr_decay_iters=self.lr_decay_iters,
            lr_decay_factor=self.lr_decay_factor, momentum=self.momentum,
            weight_decay=self.weight_decay, total_iters=self.total_iters, seed=self.seed,
            augment=self.augment, precision=self.precision, lam=self.lam, variant=self.variant,
            n=self.recurs, eval_every=self.eval_every, log_every=self.log_every,
            record_wall_time=self.record_wall_time)

    def num_classes(self) -> int:
        if self.dataset == "synthetic":
            return self.synthetic_classes
        return len(self.classes) if self.classes else 10

    def teacher_arch(self) -> ArchSpec:
        return ArchSpec.teacher(self.num_classes(), self.teacher_widths, self.teacher_blocks)

    def student_arch(self) -> ArchSpec:
        return self.teacher_arch().halved(self.variant, self.recurs)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)
