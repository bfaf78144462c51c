"""Procedural shapes (unions of spheres, boxes and capsules) with exact occupancy."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("sphere_box", "sphere", "box", "mixed")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def validate(self):
        if not self.radius > 0:
            raise ShapeError(f"sphere radius must be positive, got {self.radius}")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.center) + self.radius * _unit_vectors(rng, n)

    def extent(self) -> np.ndarray:
        return np.full(3, self.radius)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def validate(self):
        if min(self.half_extents) <= 0:
            raise ShapeError(f"box half extents must be positive, got {self.half_extents}")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def _face_areas(self) -> np.ndarray:
        a, b, c = self.half_extents
        # faces normal to x, y, z (two each)
        return np.array([4 * b * c, 4 * a * c, 4 * a * b])

    def area(self) -> float:
        return float(2 * self._face_areas().sum())

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        half = np.asarray(self.half_extents)
        areas = np.repeat(self._face_areas(), 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        return pts + np.asarray(self.center)

    def extent(self) -> np.ndarray:
        return np.asarray(self.half_extents, dtype=float)

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(np.abs(self.center) + np.asarray(self.half_extents)))

    def to_dict(self) -> dict:
        return {"type": "box", "center": list(self.center), "half_extents": list(self.half_extents)}


@dataclass(frozen=True)
class Capsule:
    p0: tuple[float, float, float]
    p1: tuple[float, float, float]
    radius: float

    def validate(self):
        if not self.radius > 0:
            raise ShapeError(f"capsule radius must be positive, got {self.radius}")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.p0), np.asarray(self.p1)
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(p.shape[:-1]) if denom == 0 else np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(p - closest, axis=-1) - self.radius

    def _length(self) -> float:
        return float(np.linalg.norm(np.asarray(self.p1) - np.asarray(self.p0)))

    def area(self) -> float:
        return 2 * np.pi * self.radius * self._length() + 4 * np.pi * self.radius**2

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        a, b = np.asarray(self.p0, dtype=float), np.asarray(self.p1, dtype=float)
        L, r = self._length(), self.radius
        axis = (b - a) / L if L > 0 else np.array([0.0, 0.0, 1.0])
        u = _unit_vectors(rng, n)
        on_side = rng.random(n) < (2 * np.pi * r * L) / self.area()
        # caps: a sphere point, pushed to the hemisphere facing away from the segment
        along = u @ axis
        cap_pts = np.where((along >= 0)[:, None], b + r * u, a + r * u)
        # side: radial direction orthogonal to the axis, uniform height
        radial = u - along[:, None] * axis
        radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-300)
        side_pts = a + rng.random(n)[:, None] * (b - a) + r * radial
        return np.where(on_side[:, None], side_pts, cap_pts)

    def extent(self) -> np.ndarray:
        a, b = np.asarray(self.p0), np.asarray(self.p1)
        return np.abs(b - a) / 2 + self.radius

    def bounding_radius(self) -> float:
        return float(max(np.linalg.norm(self.p0), np.linalg.norm(self.p1)) + self.radius)

    def to_dict(self) -> dict:
        return {"type": "capsule", "p0": list(self.p0), "p1": list(self.p1), "radius": self.radius}


Primitive = Sphere | Box | Capsule


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    bad = norm[:, 0] < 1e-12
    while bad.any():
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-12
    return v / norm


@dataclass(frozen=True)
class ShapeSpec:
    """Union of primitives."""

    primitives: tuple[Primitive, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.primitives:
            raise ShapeError("shape needs at least one primitive")
        for prim in self.primitives:
            prim.validate()

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.min([prim.sdf(p) for prim in self.primitives], axis=0)

    def occupancy(self, points) -> np.ndarray:
        """1 inside the union (boundary included), else 0."""
        return (self.sdf(points) <= 0).astype(np.float64)

    __call__ = occupancy

    def bounding_radius(self) -> float:
        return max(prim.bounding_radius() for prim in self.primitives)

    def fits_unit_cube(self, half: float = 0.5) -> bool:
        return all(
            np.all(np.abs(np.asarray(_center(p))) + p.extent() <= half + 1e-12) for p in self.primitives
        )

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` points uniform by area on the union boundary."""
        if n <= 0:
            return np.zeros((0, 3))
        areas = np.array([p.area() for p in self.primitives])
        out, have = [], 0
        for _ in range(1000):
            m = max(2 * (n - have), 16)
            which = rng.choice(len(self.primitives), size=m, p=areas / areas.sum())
            cand = np.empty((m, 3))
            for i, prim in enumerate(self.primitives):
                sel = which == i
                if sel.any():
                    cand[sel] = prim.sample_surface(rng, int(sel.sum()))
            keep = np.ones(m, dtype=bool)
            for i, prim in enumerate(self.primitives):
                others = which != i
                if others.any():
                    keep[others] &= prim.sdf(cand[others]) >= 0
            cand = cand[keep][: n - have]
            out.append(cand)
            have += cand.shape[0]
            if have >= n:
                return np.concatenate(out)
        raise ShapeError("surface rejection sampling did not converge")

    def volume_mc(self, rng: np.random.Generator, n: int = 200_000) -> float:
        return float(self.occupancy(rng.uniform(-0.5, 0.5, size=(n, 3))).mean())

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        prims = []
        for p in d["primitives"]:
            kind = p["type"]
            if kind == "sphere":
                prims.append(Sphere(tuple(p["center"]), float(p["radius"])))
            elif kind == "box":
                prims.append(Box(tuple(p["center"]), tuple(p["half_extents"])))
            elif kind == "capsule":
                prims.append(Capsule(tuple(p["p0"]), tuple(p["p1"]), float(p["radius"])))
            else:
                raise ShapeError(f"unknown primitive type {kind!r}")
        return cls(tuple(prims))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _center(p: Primitive):
    if isinstance(p, Capsule):
        return (np.asarray(p.p0) + np.asarray(p.p1)) / 2
    return p.center


def random_shape(rng: np.random.Generator, family: str = "sphere_box", max_primitives: int = 3, half: float = 0.45) -> ShapeSpec:
    """Union of 1..max_primitives random primitives inside ``[-half, half]^3``."""
    if family not in FAMILIES:
        raise ShapeError(f"unknown shape family {family!r}")
    kinds = {"sphere_box": ("sphere", "box"), "sphere": ("sphere",), "box": ("box",), "mixed": ("sphere", "box", "capsule")}[family]
    prims = []
    for _ in range(int(rng.integers(1, max_primitives + 1))):
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "sphere":
            r = float(rng.uniform(0.15, 0.3))
            c = rng.uniform(-(half - r), half - r, size=3)
            prims.append(Sphere(tuple(c), r))
        elif kind == "box":
            e = rng.uniform(0.1, 0.25, size=3)
            c = rng.uniform(-(half - e), half - e)
            prims.append(Box(tuple(c), tuple(e)))
        else:
            r = float(rng.uniform(0.08, 0.15))
            reach = half - r
            p0 = rng.uniform(-reach, reach, size=3)
            p1 = rng.uniform(-reach, reach, size=3)
            prims.append(Capsule(tuple(p0), tuple(p1), r))
    return ShapeSpec(tuple(prims))


def synth_shape(spec: ShapeSpec, rng: np.random.Generator, n_surface: int = 300, noise_sd: float = 0.005):
    """Noisy surface cloud plus the exact occupancy oracle of ``spec``."""
    if noise_sd < 0:
        raise ShapeError("noise_sd must be non-negative")
    pts = spec.sample_surface(rng, n_surface)
    if noise_sd > 0:
        pts = pts + rng.normal(0.0, noise_sd, size=pts.shape)
    return pts, spec.occupancy


def sample_queries(spec: ShapeSpec, rng: np.random.Generator, n: int, near_surface_fraction: float = 0.5, offset_sd: float = 0.025):
    """Uniform queries in the unit cube mixed with jittered surface points, with labels."""
    if not 0 <= near_surface_fraction <= 1:
        raise ShapeError("near_surface_fraction must lie in [0, 1]")
    if n <= 0:
        return np.zeros((0, 3)), np.zeros(0)
    n_near = int(round(near_surface_fraction * n))
    uni = rng.uniform(-0.5, 0.5, size=(n - n_near, 3))
    near = spec.sample_surface(rng, n_near)
    if n_near:
        near = near + rng.normal(0.0, offset_sd, size=near.shape)
    pts = np.concatenate([uni, near])
    return pts, spec.occupancy(pts)
