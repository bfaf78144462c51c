"""Occupancy training: BCE loss, Adam and the training loop."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from .geometry import TRANSFORM_MODES, random_transform
from .implicitnet import ModelConfig, ModelParameters, forward_tensors, init_params, model_forward
from .recon import volumetric_iou
from .shapes import FAMILIES, ShapeSpec, random_shape, sample_queries, synth_shape

__all__ = [
    "ShapeSpec",
    "synth_shape",
    "sample_queries",
    "TrainingConfig",
    "TrainingDiverged",
    "AdamState",
    "bce_loss",
    "adam_step",
    "train",
    "METRICS_HEADER",
    "format_metrics_csv",
]

METRICS_HEADER = ("step", "loss", "val_iou", "lr", "wall_ms")
BCE_CLAMP = 1e-7


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "sim"
    seed: int = 0
    iterations: int = 3000
    clouds_per_step: int = 1
    n_surface: int = 300
    n_queries: int = 512
    noise_sd: float = 0.005
    near_surface_fraction: float = 0.5
    family: str = "sphere_box"
    max_primitives: int = 3
    lr: float = 1e-3
    lr_decay_at: float = 2 / 3
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augmentation: str = "identity"
    # channel plan
    k: int = 20
    fractions: tuple[float, ...] = (0.2, 0.05)
    hidden_h: int | None = None
    hidden_v: int | None = None
    decoder_width: int = 32
    decoder_blocks: int = 5
    scalar_bias: bool = False
    # validation and logging
    log_every: int = 100
    n_val_shapes: int = 8
    n_val_queries: int = 2048
    val_transform: str = "identity"
    compute_dtype: str = "float32"
    threads: int = 1
    log_wall_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        counts = ("clouds_per_step", "n_surface", "n_queries", "log_every", "n_val_shapes", "n_val_queries", "threads", "max_primitives")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0 <= self.near_surface_fraction <= 1:
            raise ValueError("near_surface_fraction must lie in [0, 1]")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for name in ("augmentation", "val_transform"):
            if getattr(self, name) not in TRANSFORM_MODES:
                raise ValueError(f"{name} must be one of {TRANSFORM_MODES}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")
        if not self.lr > 0 or not 0 <= self.lr_decay_at <= 1:
            raise ValueError("lr must be positive and lr_decay_at in [0, 1]")
        self.model_config()  # validates the channel plan

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            mode=self.mode,
            k=self.k,
            fractions=self.fractions,
            hidden_h=self.hidden_h,
            hidden_v=self.hidden_v,
            decoder_width=self.decoder_width,
            decoder_blocks=self.decoder_blocks,
            scalar_bias=self.scalar_bias,
        )

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``: ``lr`` then ``lr * decay_factor``."""
        return self.lr if step < self.lr_decay_at * self.iterations else self.lr * self.lr_decay_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# ----------------------------------------------------------------- loss


def bce_loss(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    p = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


# ----------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    theta: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper = AdamHyper(),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not modified."""
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    new_theta, m_out, v_out = {}, {}, {}
    for name, w in theta.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_theta[name] = w - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        m_out[name], v_out[name] = m, v
    return new_theta, AdamState(m_out, v_out, t)


# ----------------------------------------------------------------- loop


@dataclass
class ValidationSet:
    clouds: list[np.ndarray]
    queries: list[np.ndarray]
    labels: list[np.ndarray]


def make_validation_set(cfg: TrainingConfig, rng: np.random.Generator) -> ValidationSet:
    clouds, queries, labels = [], [], []
    for _ in range(cfg.n_val_shapes):
        spec = random_shape(rng, cfg.family, cfg.max_primitives)
        X, oracle = synth_shape(spec, rng, cfg.n_surface, cfg.noise_sd)
        q = rng.uniform(-0.5, 0.5, size=(cfg.n_val_queries, 3))
        T = random_transform(rng, cfg.val_transform, bounding_radius=spec.bounding_radius())
        clouds.append(T.apply(X))
        queries.append(T.apply(q))
        labels.append(oracle(q))
    return ValidationSet(clouds, queries, labels)


def validation_iou(theta: ModelParameters, val: ValidationSet) -> float:
    """IoU over the pooled validation queries."""
    pred = [model_forward(X, q, theta) >= 0.5 for X, q in zip(val.clouds, val.queries)]
    return volumetric_iou(np.concatenate(pred), np.concatenate(val.labels))


def _cloud_grads(X, q, y, params, mcfg, dtype):
    with dc.finite_checks(False):
        with dc.Tape() as tape:
            pred = forward_tensors(X, q, params, mcfg, dtype=dtype)
            loss = dc.bce(pred, y.astype(dtype), clamp=BCE_CLAMP)
        grads = dc.backward(tape, loss, params)
    return float(loss.data), grads


def loss_trend_ok(losses, horizon: int = 500, window: int = 50) -> bool:
    """Means of consecutive ``window``-step blocks over the first ``horizon`` steps strictly decrease."""
    x = np.asarray(losses[:horizon], dtype=np.float64)
    n = x.size // window
    if n < 2:
        return True
    blocks = x[: n * window].reshape(n, window).mean(axis=1)
    return bool(np.all(np.diff(blocks) < 0))


@dataclass
class TrainResult:
    theta: ModelParameters
    metrics: list[dict]
    losses: list[float]
    flags: list[str]


def train(
    cfg: TrainingConfig,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a model from scratch; deterministic given ``cfg.seed``.

    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    mcfg = cfg.model_config()
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, data_ss, aug_ss, val_ss = ss.spawn(4)
    theta = init_params(mcfg, np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    aug_rng = np.random.default_rng(aug_ss)
    val = make_validation_set(cfg, np.random.default_rng(val_ss))
    dtype = np.float32 if cfg.compute_dtype == "float32" else np.float64
    state = AdamState()
    metrics: list[dict] = []
    losses: list[float] = []
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for step in range(cfg.iterations):
            batch = []
            for _ in range(cfg.clouds_per_step):
                spec = random_shape(data_rng, cfg.family, cfg.max_primitives)
                X, _ = synth_shape(spec, data_rng, cfg.n_surface, cfg.noise_sd)
                q, y = sample_queries(spec, data_rng, cfg.n_queries, cfg.near_surface_fraction)
                T = random_transform(aug_rng, cfg.augmentation, bounding_radius=spec.bounding_radius())
                batch.append((T.apply(X), T.apply(q), y))
            # finiteness is checked explicitly below, so overflow warnings are noise
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    params = theta.tensors(requires_grad=True, dtype=dtype)
                except dc.NonFiniteError:
                    raise TrainingDiverged(step + 1, float("nan")) from None
                jobs = [(X, q, y, params, mcfg, dtype) for X, q, y in batch]
                results = list(pool.map(lambda a: _cloud_grads(*a), jobs)) if pool else [_cloud_grads(*a) for a in jobs]
                loss = float(np.mean([r[0] for r in results]))
            if not np.isfinite(loss):
                raise TrainingDiverged(step + 1, loss)
            grads = {}
            for name in theta.arrays:
                acc = results[0][1][name].astype(np.float64)
                for _, g in results[1:]:
                    acc = acc + g[name]
                grads[name] = acc / len(results)
            lr = cfg.lr_at(step)
            hyper = AdamHyper(lr, cfg.beta1, cfg.beta2, cfg.eps)
            new_arrays, state = adam_step(theta.arrays, grads, state, hyper)
            theta = ModelParameters(mcfg, new_arrays)
            losses.append(loss)
            done = step + 1
            if done % cfg.log_every == 0 or done == cfg.iterations:
                window = losses[-(done - (metrics[-1]["step"] if metrics else 0)) :]
                row = {
                    "step": done,
                    "loss": float(np.mean(window)),
                    "val_iou": validation_iou(theta, val),
                    "lr": lr,
                    "wall_ms": int(round((time.perf_counter() - t0) * 1000)) if cfg.log_wall_time else 0,
                }
                metrics.append(row)
                if progress:
                    progress(row)
    finally:
        if pool:
            pool.shutdown()
    flags = []
    if cfg.iterations >= 100 and not loss_trend_ok(losses):
        flags.append("loss_not_decreasing")
    return TrainResult(theta, metrics, losses, flags)


def format_metrics_csv(rows) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in rows:
        lines.append(f"{r['step']},{r['loss']!r},{r['val_iou']!r},{r['lr']!r},{r['wall_ms']}")
    return "\n".join(lines) + "\n"
