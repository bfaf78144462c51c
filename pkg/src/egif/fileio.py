"""Readers and writers for XYZ / PLY point clouds and OBJ meshes."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def write_xyz(path, points) -> None:
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in P.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'x y z', got {text!r}")
            try:
                row = [float(v) for v in parts]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {text!r}") from None
            if not np.all(np.isfinite(row)):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_ply(path, points) -> None:
    """Binary little-endian PLY with float32 x/y/z vertex properties."""
    P = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {P.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(P.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> np.ndarray:
    """Read vertex x/y/z from a binary little-endian PLY (extra scalar properties skipped)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n") :]
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    n_vertex, props, in_vertex = None, [], False
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
            elif n_vertex is None:
                raise FormatError(f"{path}: vertex element must come first")
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"{path}: list properties on vertices are not supported")
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type {parts[1]!r}")
            props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if n_vertex is None:
        raise FormatError(f"{path}: no vertex element")
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise FormatError(f"{path}: vertex element lacks x/y/z")
    dtype = np.dtype(props)
    if len(body) < dtype.itemsize * n_vertex:
        raise FormatError(f"{path}: truncated vertex data")
    arr = np.frombuffer(body, dtype=dtype, count=n_vertex)
    return np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)


def read_cloud(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_obj(path, vertices, triangles) -> None:
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in V:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for i, j, k in F + 1:
            fh.write(f"f {i} {j} {k}\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(v.split("/")[0]) - 1 for v in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
