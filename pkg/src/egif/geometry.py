"""Point-cloud kernels: similarity transforms, farthest point sampling, k-NN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TRANSFORM_MODES = ("identity", "rotation", "translation", "scale", "all")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation`` with orthogonal ``rotation``."""

    rotation: np.ndarray
    scale: float = 1.0
    translation: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        Q = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.zeros(3) if self.translation is None else np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", Q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))
        if not np.all(np.isfinite(Q)) or not np.all(np.isfinite(t)) or not math.isfinite(self.scale):
            raise GeometryError("transform has non-finite entries")
        if np.abs(Q.T @ Q - np.eye(3)).max() > 1e-10:
            raise GeometryError("rotation is not orthogonal")
        if abs(abs(np.linalg.det(Q)) - 1.0) > 1e-10:
            raise GeometryError("rotation determinant is not +-1")
        if self.scale <= 0:
            raise GeometryError(f"scale must be positive, got {self.scale}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SimilarityTransform):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and self.scale == other.scale
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), 1.0, np.zeros(3))

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=np.float64)
        return self.scale * (P @ self.rotation.T) + self.translation

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """``self ∘ inner``: apply ``inner`` first."""
        return SimilarityTransform(
            self.rotation @ inner.rotation,
            self.scale * inner.scale,
            self.scale * (self.rotation @ inner.translation) + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        Qt = self.rotation.T
        return SimilarityTransform(Qt, 1.0 / self.scale, -(Qt @ self.translation) / self.scale)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "scale": self.scale,
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(np.array(d["rotation"]), d["scale"], np.array(d["translation"]))


def apply_transform(T: SimilarityTransform, points) -> np.ndarray:
    return T.apply(points)


def as_cloud(points) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3:
        raise GeometryError(f"expected an (N, 3) point array, got shape {P.shape}")
    if P.shape[0] == 0:
        raise GeometryError("empty point cloud")
    if not np.all(np.isfinite(P)):
        raise GeometryError("point cloud has non-finite coordinates")
    return P


def farthest_point_sample(points, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts at ``start``; each next pick maximises the distance to the
    already-selected set, ties going to the lowest index.  Returns indices
    in selection order.
    """
    P = as_cloud(points)
    n = P.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range for {n} points")
    picked = np.empty(m, dtype=np.intp)
    picked[0] = start
    dist = ((P - P[start]) ** 2).sum(axis=1)
    for j in range(1, m):
        nxt = int(np.argmax(dist))
        picked[j] = nxt
        dist = np.minimum(dist, ((P - P[nxt]) ** 2).sum(axis=1))
    return picked


def fps_start_index(points) -> int:
    """Point farthest from the centroid (lowest index on ties).

    Unlike a fixed index this choice commutes with permutations and with
    similarity transforms of the cloud.
    """
    P = as_cloud(points)
    return int(np.argmax(((P - P.mean(axis=0)) ** 2).sum(axis=1)))


@dataclass(frozen=True)
class KnnGraph:
    query: np.ndarray
    neighbors: np.ndarray
    displacements: np.ndarray

    @property
    def distances(self) -> np.ndarray:
        return np.sqrt((self.displacements**2).sum(axis=-1))


def knn_indices(queries, points, k: int, chunk: int = 4096) -> np.ndarray:
    """Indices of the ``min(k, N)`` nearest points for each query row.

    Sorted by squared Euclidean distance, ties to the lowest index.
    """
    P = np.asarray(points, dtype=np.float64)
    Qp = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if P.ndim != 2 or P.shape[0] == 0:
        raise GeometryError("k-NN on an empty point cloud")
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    kk = min(k, P.shape[0])
    out = np.empty((Qp.shape[0], kk), dtype=np.intp)
    for lo in range(0, Qp.shape[0], chunk):
        q = Qp[lo : lo + chunk]
        d2 = ((q[:, None, :] - P[None, :, :]) ** 2).sum(axis=-1)
        if kk < P.shape[0] // 4:
            # stable order within the k smallest; rows with a tie straddling the
            # cut fall back to a full stable sort
            part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
            pv = np.take_along_axis(d2, part, axis=1)
            kth = pv.max(axis=1)
            ties = (d2 == kth[:, None]).sum(axis=1) > (pv == kth[:, None]).sum(axis=1)
            order = np.lexsort((part, pv), axis=1)
            sel = np.take_along_axis(part, order, axis=1)
            if ties.any():
                sel[ties] = np.argsort(d2[ties], axis=1, kind="stable")[:, :kk]
            # equal distances inside the cut are ordered by index via lexsort
            out[lo : lo + chunk] = sel
        else:
            out[lo : lo + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    return out


def knn(query, points, k: int) -> KnnGraph:
    P = np.asarray(points, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    idx = knn_indices(q[None], P, k)[0]
    return KnnGraph(q, idx, P[idx] - q)


def level_sizes(n: int, fractions) -> list[int]:
    """Cardinalities of the sampling levels: ``n`` then ``ceil(f * n)``, at least 1."""
    sizes = [n]
    for f in fractions:
        sizes.append(max(1, min(sizes[-1], math.ceil(f * n - 1e-9))))
    return sizes


# ---------------------------------------------------------------- sampling


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_orthogonal(rng: np.random.Generator) -> np.ndarray:
    """Uniform element of O(3): a random rotation, reflected half the time."""
    Q = random_rotation(rng)
    if rng.random() < 0.5:
        Q = Q @ np.diag([-1.0, 1.0, 1.0])
    return Q


def random_transform(
    rng: np.random.Generator,
    mode: str = "all",
    bounding_radius: float = 0.5,
    min_scale: float = 0.2,
    max_scale: float = 1.0,
    half_extent: float = 0.5,
) -> SimilarityTransform:
    """Random augmentation transform keeping a centred shape in the unit cube.

    The shape is assumed to lie in a ball of ``bounding_radius`` about the
    origin; scaling is drawn from ``[min_scale, max_scale]`` (capped so the
    shape still fits) and translation uniformly among offsets that keep the
    scaled ball inside ``[-half_extent, half_extent]^3``.
    """
    if mode not in TRANSFORM_MODES:
        raise GeometryError(f"unknown transform mode {mode!r}")
    if mode == "identity":
        return SimilarityTransform.identity()
    Q = random_rotation(rng) if mode in ("rotation", "all") else np.eye(3)
    s = 1.0
    if mode in ("scale", "all"):
        hi = max_scale
        if mode == "all":
            hi = min(max_scale, half_extent / bounding_radius)
            if hi < min_scale:
                raise GeometryError(
                    f"bounding radius {bounding_radius} does not fit the cube at scale {min_scale}"
                )
        s = float(rng.uniform(min_scale, hi))
    t = np.zeros(3)
    if mode in ("translation", "all"):
        slack = half_extent - s * bounding_radius
        if slack < 0:
            raise GeometryError(f"bounding radius {bounding_radius} leaves no room for translation")
        t = rng.uniform(-slack, slack, size=3)
    return SimilarityTransform(Q, s, t)
