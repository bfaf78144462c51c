"""Binary ``.egif`` checkpoints.

Layout (all integers little-endian)::

    b"EGIF"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_tensors
    per tensor: u16 name_len, name (UTF-8), u32 rank, u64 extents[rank], u64 offset
    payload: float64 tensor data, ``offset`` counted from the payload start

Tensors are written in sorted name order so equal parameters give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .implicitnet import FORMAT_VERSION, ModelConfig, ModelParameters, init_params

MAGIC = b"EGIF"


class CheckpointError(ValueError):
    pass


def _header(theta: ModelParameters, seed: int | None, iterations: int | None) -> dict:
    cfg = theta.config
    return {
        "mode": cfg.mode,
        "k": cfg.k,
        "L": cfg.levels,
        "fractions": list(cfg.fractions),
        "channel_plan": {
            "hidden_h": cfg.hidden_h,
            "hidden_v": cfg.hidden_v,
            "decoder_width": cfg.decoder_width,
            "decoder_blocks": cfg.decoder_blocks,
            "scalar_bias": cfg.scalar_bias,
        },
        "seed": seed,
        "iterations": iterations,
    }


def dumps(theta: ModelParameters, seed: int | None = None, iterations: int | None = None) -> bytes:
    header = json.dumps(_header(theta, seed, iterations), sort_keys=True, separators=(",", ":")).encode()
    names = sorted(theta.arrays)
    directory, payload, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(theta.arrays[name], dtype="<f8")
        raw = name.encode()
        directory.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim))
        directory.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", offset))
        payload.append(arr.tobytes())
        offset += arr.nbytes
    return b"".join(
        [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(names))]
        + directory
        + payload
    )


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> tuple[ModelParameters, dict]:
    """Parse checkpoint bytes into parameters and the JSON header."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an EGIF checkpoint (bad magic)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(header_len).decode())
        plan = header["channel_plan"]
        cfg = ModelConfig(mode=header["mode"], k=header["k"], fractions=tuple(header["fractions"]), **plan)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if cfg.levels != header.get("L"):
        raise CheckpointError("header level count disagrees with fractions")
    (n,) = r.unpack("<I")
    entries = []
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, tuple(shape), offset))
    payload = buf[r.pos :]
    arrays = {}
    for name, shape, offset in entries:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"tensor {name!r} runs past the end of the payload")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
    expected = {k: v.shape for k, v in init_params(cfg, 0).arrays.items()}
    got = {k: v.shape for k, v in arrays.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise CheckpointError(f"tensors do not match a {cfg.mode} model: missing={missing} extra={extra} bad_shape={bad}")
    return ModelParameters(cfg, arrays, version), header


def save(path, theta: ModelParameters, seed: int | None = None, iterations: int | None = None) -> None:
    Path(path).write_bytes(dumps(theta, seed, iterations))


def load(path) -> tuple[ModelParameters, dict]:
    return loads(Path(path).read_bytes())
