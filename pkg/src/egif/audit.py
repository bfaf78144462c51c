"""Empirical invariance audit: compare ``F(T(p) | T(X))`` with ``F(p | X)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SimilarityTransform, random_orthogonal
from .implicitnet import ModelParameters, model_forward
from .shapes import random_shape, synth_shape

CLASSES = ("identity", "rotation", "translation", "rigid", "scale", "similarity")

CLAIMS = {
    "plain": ("identity",),
    "so3": ("identity", "rotation"),
    "se3": ("identity", "rotation", "translation", "rigid"),
    "sim": CLASSES,
}

SCALE_RANGE = (0.2, 5.0)
TRANSLATION_RANGE = 1.0


def audit_transform(rng: np.random.Generator, cls: str) -> SimilarityTransform:
    """Random member of a transform class.

    Rotations include reflections; scales are log-uniform in ``SCALE_RANGE``;
    translations uniform in ``[-1, 1]^3``.
    """
    if cls not in CLASSES:
        raise ValueError(f"unknown transform class {cls!r}; expected one of {CLASSES}")
    if cls == "identity":
        return SimilarityTransform.identity()
    Q = random_orthogonal(rng) if cls in ("rotation", "rigid", "similarity") else np.eye(3)
    s = 1.0
    if cls in ("scale", "similarity"):
        s = float(np.exp(rng.uniform(*np.log(SCALE_RANGE))))
    t = np.zeros(3)
    if cls in ("translation", "rigid", "similarity"):
        t = rng.uniform(-TRANSLATION_RANGE, TRANSLATION_RANGE, size=3)
    return SimilarityTransform(Q, s, t)


@dataclass
class ClassResult:
    mode: str
    cls: str
    n: int
    max_abs_dev: float
    passed: bool
    claimed: bool
    worst: SimilarityTransform | None

    def record(self) -> dict:
        return {"mode": self.mode, "class": self.cls, "n": self.n, "max_abs_dev": self.max_abs_dev, "pass": self.passed}


def default_probe(seed: int = 0, n_points: int = 300, n_queries: int = 200):
    """Seeded cloud and query set used when the caller supplies none."""
    rng = np.random.default_rng(seed)
    spec = random_shape(rng, "sphere_box")
    X, _ = synth_shape(spec, rng, n_points)
    q = rng.uniform(-0.5, 0.5, size=(n_queries, 3))
    return X, q


def audit(
    theta: ModelParameters,
    X,
    queries,
    n_transforms: int = 100,
    tolerance: float = 1e-8,
    seed: int = 0,
    claimed_mode: str | None = None,
    classes=CLASSES,
) -> list[ClassResult]:
    """Max deviation per transform class; ``claimed`` marks the classes the mode guarantees."""
    mode = claimed_mode or theta.mode
    claims = CLAIMS[mode]
    X = np.asarray(X, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    base = model_forward(X, q, theta)
    out = []
    for i, cls in enumerate(classes):
        rng = np.random.default_rng([seed, i])
        worst, worst_T = 0.0, None
        n = 1 if cls == "identity" else n_transforms
        for _ in range(n):
            T = audit_transform(rng, cls)
            dev = float(np.max(np.abs(model_forward(T.apply(X), T.apply(q), theta) - base)))
            if worst_T is None or dev > worst:
                worst, worst_T = dev, T
        out.append(ClassResult(mode, cls, n, worst, worst <= tolerance, cls in claims, worst_T))
    return out


def report(results: list[ClassResult]) -> dict:
    failures = [r for r in results if r.claimed and not r.passed]
    return {
        "records": [r.record() for r in results],
        "claimed": [r.cls for r in results if r.claimed],
        "ok": not failures,
        "failures": [{"class": r.cls, "max_abs_dev": r.max_abs_dev, "transform": r.worst.to_dict()} for r in failures],
    }
