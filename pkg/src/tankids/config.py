"""Experiment configuration and seed derivation.

Config files are plain ``key = value`` lines; ``#`` starts a comment.  Lists
are comma-separated.  Unknown keys are rejected so typos do not pass
silently.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .forest import DEFAULT_GRID, Hyperparams
from .plant import PlantParams, Thresholds
from .protocol import RegisterMap
from .wire import SignPolicy


class ConfigError(ValueError):
    pass


def derive_seed(master: int, name: str) -> int:
    """Stable 63-bit seed for a named stage or scenario."""
    state = np.random.SeedSequence([master, zlib.crc32(name.encode())]).generate_state(1, np.uint64)
    return int(state[0] >> 1)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


def _depths(value: str) -> tuple[Optional[int], ...]:
    return tuple(None if v.strip().lower() in ("none", "unlimited") else int(v) for v in value.split(",") if v.strip())


def _fmt_list(values) -> str:
    return ",".join("none" if v is None else f"{v:g}" if isinstance(v, float) else str(v) for v in values)


@dataclass(frozen=True)
class PipelineConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    thresholds: Thresholds = field(default_factory=Thresholds)
    registers: RegisterMap = field(default_factory=RegisterMap)
    sign_policy: SignPolicy = SignPolicy.RANDOM_PER_FRAME
    attack_target: tuple[int, ...] = (0,)
    train_intensities: tuple[float, ...] = (0.01, 0.10, 0.20)
    test_intensities: tuple[float, ...] = (0.01, 0.05, 0.10, 0.15, 0.20)
    normal_train: int = 500
    normal_test: int = 500
    attack_train: int = 500
    attack_test: int = 100
    sampling_stride: int = 1
    grid_n_trees: tuple[int, ...] = (10, 50, 100)
    grid_max_depth: tuple[Optional[int], ...] = (4, 8, None)
    grid_min_samples_split: tuple[int, ...] = (2, 10)
    features_per_split: Optional[int] = None
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not set(self.train_intensities) <= set(self.test_intensities):
            raise ConfigError("training intensities must be a subset of testing intensities")
        for eps in self.test_intensities:
            if not 0 <= eps <= 1:
                raise ConfigError(f"attack intensity {eps} outside [0, 1]")
        for name in ("normal_train", "normal_test", "attack_train", "attack_test", "sampling_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        try:
            self.plant.check_fill_dominance(self.thresholds)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def grid(self) -> tuple[Hyperparams, ...]:
        return tuple(
            Hyperparams(n, depth, mss, self.features_per_split)
            for n in self.grid_n_trees
            for depth in self.grid_max_depth
            for mss in self.grid_min_samples_split
        )

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "PipelineConfig | None" = None) -> "PipelineConfig":
        cfg = base or cls()
        plant_kw: dict[str, Any] = {}
        thr_kw: dict[str, Any] = {}
        reg_kw: dict[str, Any] = {}
        top: dict[str, Any] = {}
        plant_keys = {f.name for f in fields(PlantParams)}
        thr_keys = {f.name for f in fields(Thresholds)}
        reg_keys = {f.name for f in fields(RegisterMap)}
        parsers = {
            "sign_policy": SignPolicy,
            "attack_target": _ints,
            "train_intensities": _floats,
            "test_intensities": _floats,
            "grid_n_trees": _ints,
            "grid_max_depth": _depths,
            "grid_min_samples_split": _ints,
            "features_per_split": lambda v: None if v.lower() in ("none", "auto") else int(v),
        }
        for f in fields(cls):
            if f.name not in parsers and f.name not in ("plant", "thresholds", "registers"):
                parsers[f.name] = int
        for key, value in values.items():
            try:
                if key in plant_keys:
                    plant_kw[key] = float(value)
                elif key in thr_keys:
                    thr_kw[key] = float(value)
                elif key in reg_keys:
                    reg_kw[key] = int(value)
                elif key in parsers:
                    top[key] = parsers[key](value)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
        try:
            return replace(
                cfg,
                plant=replace(cfg.plant, **plant_kw),
                thresholds=replace(cfg.thresholds, **thr_kw),
                registers=replace(cfg.registers, **reg_kw),
                **top,
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_mapping(parse_kv(text, str(path)), base)

    def to_mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for part in (self.plant, self.thresholds, self.registers):
            for f in fields(part):
                out[f.name] = repr(getattr(part, f.name))
        for f in fields(self):
            if f.name in ("plant", "thresholds", "registers"):
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                out[f.name] = _fmt_list(value)
            elif isinstance(value, SignPolicy):
                out[f.name] = value.value
            elif value is None:
                out[f.name] = "none"
            else:
                out[f.name] = str(value)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_mapping().items())
