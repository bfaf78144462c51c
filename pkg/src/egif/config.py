"""JSON run configuration.

A run config is one flat JSON object.  Every :class:`TrainingConfig` field
is accepted, plus the reconstruction and audit settings below.  Unknown keys
are rejected.  Defaults (see ``egif.cli --help`` or :data:`DEFAULTS`)::

    training        TrainingConfig defaults (mode "sim", 3000 iterations, ...)
    resolution      64        marching-cubes lattice size per axis
    tau             0.5       iso level
    bounds          [[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]]
    n_eval          100000    uniform queries for IoU
    audit_transforms 100      transforms per class
    audit_tolerance  1e-8     max allowed deviation for claimed classes
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    resolution: int = 64
    tau: float = 0.5
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    n_eval: int = 100_000
    audit_transforms: int = 100
    audit_tolerance: float = 1e-8

    def __post_init__(self):
        if self.resolution < 2:
            raise ConfigError("resolution must be >= 2")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        lo, hi = self.bounds
        if len(lo) != 3 or len(hi) != 3 or any(h <= l for l, h in zip(lo, hi)):
            raise ConfigError("bounds must be [[x0, y0, z0], [x1, y1, z1]] with x1 > x0 etc.")
        if self.n_eval < 1 or self.audit_transforms < 1:
            raise ConfigError("n_eval and audit_transforms must be >= 1")
        if not self.audit_tolerance >= 0:
            raise ConfigError("audit_tolerance must be >= 0")

    def to_dict(self) -> dict:
        d = self.training.to_dict()
        for f in fields(self):
            if f.name != "training":
                d[f.name] = getattr(self, f.name)
        d["bounds"] = [list(b) for b in self.bounds]
        return d

    def with_training(self, **changes) -> "RunConfig":
        try:
            return replace(self, training=replace(self.training, **changes))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


_RUN_KEYS = tuple(f.name for f in fields(RunConfig) if f.name != "training")
DEFAULTS = RunConfig().to_dict()


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    train_keys = set(TrainingConfig.field_names())
    for key in d:
        if key not in train_keys and key not in _RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    tkw = {k: v for k, v in d.items() if k in train_keys}
    rkw = {k: v for k, v in d.items() if k in _RUN_KEYS}
    if "fractions" in tkw:
        tkw["fractions"] = tuple(tkw["fractions"])
    if "bounds" in rkw:
        rkw["bounds"] = tuple(tuple(float(x) for x in b) for b in rkw["bounds"])
    try:
        return RunConfig(training=TrainingConfig(**tkw), **rkw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_dict(d)
