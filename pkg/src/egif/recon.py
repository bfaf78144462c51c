"""Dense field evaluation, marching cubes and reconstruction metrics."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import SimilarityTransform
from .implicitnet import ModelParameters, model_forward
from .mc_tables import CORNERS, EDGES, TRIANGLES

UNIT_BOUNDS = (np.full(3, -0.5), np.full(3, 0.5))


@dataclass
class ScalarGrid:
    """Field samples on an ``R^3`` lattice; ``values[i, j, k]`` sits at ``lo + (i, j, k) * spacing``."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        R = self.values.shape[0]
        if self.values.shape != (R, R, R) or R < 2:
            raise ValueError(f"grid values must be (R, R, R) with R >= 2, got {self.values.shape}")
        if np.any(self.hi <= self.lo):
            raise ValueError("grid bounds are degenerate")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.resolution - 1)

    def flat_x_fastest(self) -> np.ndarray:
        return self.values.transpose(2, 1, 0).ravel()


def lattice_points(resolution: int, bounds=UNIT_BOUNDS) -> np.ndarray:
    """``(R^3, 3)`` lattice coordinates in ``values.ravel()`` order."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [np.linspace(lo[d], hi[d], resolution) for d in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def evaluate_grid(
    X,
    theta: ModelParameters,
    resolution: int = 64,
    bounds=UNIT_BOUNDS,
    chunk: int = 4096,
    threads: int = 1,
) -> ScalarGrid:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    pts = lattice_points(resolution, bounds)
    chunks = [pts[lo : lo + chunk] for lo in range(0, pts.shape[0], chunk)]

    def run(q):
        return model_forward(X, q, theta, chunk=chunk)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = list(ex.map(run, chunks))
    else:
        vals = [run(q) for q in chunks]
    values = np.concatenate(vals).reshape(resolution, resolution, resolution)
    return ScalarGrid(values, bounds[0], bounds[1])


def field_grid(fn, resolution: int, bounds=UNIT_BOUNDS) -> ScalarGrid:
    """Sample a vectorised scalar function on the lattice."""
    pts = lattice_points(resolution, bounds)
    return ScalarGrid(np.asarray(fn(pts), dtype=np.float64).reshape((resolution,) * 3), bounds[0], bounds[1])


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def euler_characteristic(self) -> int:
        F = self.triangles
        e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        n_edges = np.unique(e, axis=0).shape[0] if e.size else 0
        return int(self.vertices.shape[0] - n_edges + F.shape[0])

    def edge_use_counts(self) -> np.ndarray:
        F = self.triangles
        e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_use_counts() == 2))

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


_CORNERS = np.array(CORNERS)
# per cell edge: (lower corner offset, axis)
_EDGE_BASE = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNERS[b] - _CORNERS[a]))) for a, b in EDGES])


def marching_cubes(grid: ScalarGrid, tau: float = 0.5) -> TriangleMesh:
    """Triangulate ``{x : field(x) = tau}`` with the 256-case table.

    Corners with ``value < tau`` are outside.  Vertices are shared through
    their lattice edge, interpolated linearly, and zero-area triangles are
    dropped.  Triangles are wound counter-clockwise seen from outside
    (normals point toward lower values).
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    v = grid.values
    R = grid.resolution
    below = v < tau
    n = R - 1
    case = np.zeros((n, n, n), dtype=np.int32)
    for i, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx : dx + n, dy : dy + n, dz : dz + n].astype(np.int32) << i
    active = (case != 0) & (case != 255)
    cells = np.argwhere(active)
    cases = case[active]
    if cells.shape[0] == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    tri_edges = []  # (cell row, edge id) triples per triangle
    tri_cells = []
    for c in np.unique(cases):
        table = TRIANGLES[c]
        if not table:
            continue
        rows = np.flatnonzero(cases == c)
        k = len(table) // 3
        tri_cells.append(np.repeat(rows, k))
        tri_edges.append(np.tile(np.array(table).reshape(k, 3), (rows.size, 1)))
    tcell = np.concatenate(tri_cells)
    tedge = np.concatenate(tri_edges)
    base = cells[tcell][:, None, :] + _EDGE_BASE[tedge]  # (T, 3, 3)
    axis = _EDGE_AXIS[tedge]
    gid = ((base[..., 0] * R + base[..., 1]) * R + base[..., 2]) * 3 + axis
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    tris = inverse.reshape(-1, 3)
    ax = uniq % 3
    p = uniq // 3
    i0 = np.stack([p // (R * R), (p // R) % R, p % R], axis=1)
    i1 = i0.copy()
    i1[np.arange(ax.size), ax] += 1
    v0 = v[i0[:, 0], i0[:, 1], i0[:, 2]]
    v1 = v[i1[:, 0], i1[:, 1], i1[:, 2]]
    t = (tau - v0) / (v1 - v0)
    pos0 = grid.lo + i0 * grid.spacing
    pos1 = grid.lo + i1 * grid.spacing
    verts = pos0 + t[:, None] * (pos1 - pos0)
    # table winding already gives normals pointing toward the below-iso side
    mesh = TriangleMesh(verts, tris)
    keep = mesh.areas() > 0
    tris = tris[keep]
    used, remap = np.unique(tris.ravel(), return_inverse=True)
    return TriangleMesh(verts[used], remap.reshape(-1, 3).astype(np.int64))


# ------------------------------------------------------------------ metrics


def volumetric_iou(pred, gt) -> float:
    p = np.asarray(pred).astype(bool).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} vs {g.size}")
    if p.size == 0:
        raise ValueError("IoU of empty label lists")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def nearest_distances(A, B) -> np.ndarray:
    """Distance from each row of ``A`` to its nearest row of ``B``."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    _, idx = cKDTree(B).query(A, k=1)
    return np.linalg.norm(A - B[idx], axis=1)


def chamfer_l1(A, B) -> float:
    """``0.5 * mean_A min_B |a-b| + 0.5 * mean_B min_A |a-b|``."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("chamfer distance of an empty point set")
    # fsum makes the means correctly rounded, hence independent of point order
    da, db = nearest_distances(A, B), nearest_distances(B, A)
    return 0.5 * math.fsum(da) / da.size + 0.5 * math.fsum(db) / db.size


def sample_mesh_surface(mesh: TriangleMesh, rng: np.random.Generator, n: int = 10_000) -> np.ndarray:
    """Area-weighted uniform samples on the mesh."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    tri = rng.choice(areas.size, size=n, p=areas / areas.sum())
    u, w = rng.random(n), rng.random(n)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + w[:, None] * (c - a)


@dataclass
class ReconMetrics:
    iou: float
    chamfer: float | None
    n_eval: int
    n_vertices: int = 0
    n_triangles: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["chamfer"] is not None and not np.isfinite(d["chamfer"]):
            d["chamfer"] = None  # empty mesh; JSON has no infinity
        return d


def predict_labels(X, queries, theta: ModelParameters, tau: float = 0.5) -> np.ndarray:
    return model_forward(X, queries, theta) >= tau


def eval_reconstruction(
    X,
    theta: ModelParameters,
    spec,
    n_eval: int,
    rng: np.random.Generator,
    transform: SimilarityTransform | None = None,
    tau: float = 0.5,
    resolution: int | None = 64,
    n_surface: int = 10_000,
) -> ReconMetrics:
    """IoU over uniform queries and Chamfer-L1 of the extracted mesh.

    ``X`` is the canonical-frame cloud; with ``transform`` the model sees
    ``T(X)`` and ``T(queries)`` while labels and Chamfer stay in the
    canonical frame.  ``resolution=None`` skips the mesh and Chamfer.
    """
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    T = transform or SimilarityTransform.identity()
    q = rng.uniform(-0.5, 0.5, size=(n_eval, 3))
    gt = spec.occupancy(q)
    pred = predict_labels(T.apply(X), T.apply(q), theta, tau)
    iou = volumetric_iou(pred, gt)
    if resolution is None:
        return ReconMetrics(iou, None, n_eval)
    lo, hi = UNIT_BOUNDS
    corners = T.apply(np.array(np.meshgrid([lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]])).reshape(3, -1).T)
    grid = evaluate_grid(T.apply(X), theta, resolution, (corners.min(axis=0), corners.max(axis=0)))
    mesh = marching_cubes(grid, tau)
    if mesh.is_empty:
        return ReconMetrics(iou, float("inf"), n_eval)
    mesh_pts = T.inverse().apply(sample_mesh_surface(mesh, rng, n_surface))
    true_pts = spec.sample_surface(rng, n_surface)
    return ReconMetrics(iou, chamfer_l1(mesh_pts, true_pts), n_eval, mesh.vertices.shape[0], mesh.triangles.shape[0])
