"""Graph implicit occupancy network in plain / so3 / se3 / sim modes.

Pipeline for a cloud ``X`` and queries ``p``:

* ``encode_points``: multi-level graph encoder.  Each level runs an edge
  convolution over the k-NN graph of its points, then farthest point
  sampling picks the next level.  An upsampling pass merges the nearest
  coarser feature with the same-level skip feature.
* ``aggregate_latent``: per level, an edge convolution from the query to its
  k nearest level points, pooled (max over scalars, mean over vectors) and
  concatenated across levels.
* ``decode_occupancy``: residual ReLU MLP with the latent injected into every
  block, sigmoid output.

What each mode sees:

======  =====================================  ==================
mode    geometric inputs                       invariance
======  =====================================  ==================
plain   raw coordinates and offsets (scalars)  none
so3     coordinates and offsets (vectors)      O(3) about origin
se3     offsets only (vectors)                 O(3) + translation
sim     offsets only, scale-free invariants    similarity group
======  =====================================  ==================
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .eqlayers import HybridFeature, Segment, hybrid_act, init_split_linear, invariance_map, split_hybrid_linear
from .geometry import as_cloud, farthest_point_sample, fps_start_index, knn_indices, level_sizes

MODES = ("plain", "so3", "se3", "sim")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "sim"
    k: int = 20
    fractions: tuple[float, ...] = (0.2, 0.05)
    hidden_h: int | None = None
    hidden_v: int | None = None
    decoder_width: int = 32
    decoder_blocks: int = 5
    scalar_bias: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.hidden_h is None:
            object.__setattr__(self, "hidden_h", 64 if self.mode == "plain" else 32)
        if self.hidden_v is None:
            object.__setattr__(self, "hidden_v", 0 if self.mode == "plain" else 8)
        if self.mode == "plain" and self.hidden_v:
            raise ValueError("plain mode has no vector channels")
        if self.mode != "plain" and self.hidden_v < 1:
            raise ValueError("equivariant modes need at least one vector channel")
        if self.hidden_h < 0 or self.hidden_h + self.hidden_v < 1:
            raise ValueError("channel plan must have at least one channel")
        if self.k < 1 or self.decoder_width < 1 or self.decoder_blocks < 1:
            raise ValueError("k, decoder_width and decoder_blocks must be >= 1")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("level fractions must lie in (0, 1]")
        if list(self.fractions) != sorted(self.fractions, reverse=True):
            raise ValueError("level fractions must be non-increasing")

    @property
    def levels(self) -> int:
        return len(self.fractions) + 1

    @property
    def normalized(self) -> bool:
        return self.mode == "sim"

    @property
    def uses_biases(self) -> bool:
        return self.mode == "plain" or self.scalar_bias

    @property
    def latent_dim(self) -> int:
        return self.levels * (self.hidden_h + self.hidden_v)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "fractions": list(self.fractions),
            "hidden_h": self.hidden_h,
            "hidden_v": self.hidden_v,
            "decoder_width": self.decoder_width,
            "decoder_blocks": self.decoder_blocks,
            "scalar_bias": self.scalar_bias,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{**d, "fractions": tuple(d.get("fractions", (0.2, 0.05)))})


@dataclass
class ModelParameters:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def mode(self) -> str:
        return self.config.mode

    def tensors(self, requires_grad: bool = False, dtype=np.float64) -> dict[str, Tensor]:
        return {
            k: Tensor(v.astype(dtype, copy=False), requires_grad=requires_grad, name=k)
            for k, v in self.arrays.items()
        }

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.format_version)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


# ------------------------------------------------------------ channel plan


def _node_input_widths(cfg: ModelConfig, level: int) -> tuple[int, int]:
    """(scalar, vector) channel widths of per-point input features at a level."""
    if level > 0:
        return cfg.hidden_h, cfg.hidden_v
    if cfg.mode == "plain":
        return 3, 0
    if cfg.mode == "so3":
        return 0, 1
    return 0, 0


def _center_widths(cfg: ModelConfig) -> tuple[int, int]:
    """(scalar, vector) widths of the query's own input in the aggregator."""
    return {"plain": (3, 0), "so3": (0, 1)}.get(cfg.mode, (0, 0))


def _geo_widths(cfg: ModelConfig) -> tuple[int, int]:
    return (3, 0) if cfg.mode == "plain" else (0, 1)


def _edge_segments(ctr: tuple[int, int], nbr: tuple[int, int], geo: tuple[int, int]):
    seg_h = [(n, w[0]) for n, w in (("ctr", ctr), ("nbr", nbr), ("geo", geo)) if w[0]]
    seg_v = [(n, w[1]) for n, w in (("ctr", ctr), ("nbr", nbr), ("geo", geo)) if w[1]]
    return seg_h, seg_v


def _init_edge_mlp(rng, prefix, cfg: ModelConfig, seg_h, seg_v) -> dict[str, np.ndarray]:
    H, C = cfg.hidden_h, cfg.hidden_v
    bias = cfg.uses_biases
    out = init_split_linear(rng, f"{prefix}.l1", seg_h, seg_v, H, C, bias)
    out.update(init_split_linear(rng, f"{prefix}.l2", [("in", H)] if H else [], [("in", C)] if C else [], H, C, bias))
    if C:
        out[f"{prefix}.l1.W_q"] = rng.uniform(-np.sqrt(1.0 / C), np.sqrt(1.0 / C), size=(1, C))
        out[f"{prefix}.l2.W_q"] = rng.uniform(-np.sqrt(1.0 / C), np.sqrt(1.0 / C), size=(1, C))
    return out


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParameters:
    """Seeded initialisation; weights uniform in ``±sqrt(1/fan_in)``, biases zero."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    H, C = cfg.hidden_h, cfg.hidden_v
    arrays: dict[str, np.ndarray] = {}
    for level in range(cfg.levels):
        node = _node_input_widths(cfg, level)
        seg_h, seg_v = _edge_segments(node, node, _geo_widths(cfg))
        arrays.update(_init_edge_mlp(rng, f"enc.down{level}", cfg, seg_h, seg_v))
    for level in range(cfg.levels - 2, -1, -1):
        seg_h = [("coarse", H), ("skip", H)] if H else []
        seg_v = [("coarse", C), ("skip", C)] if C else []
        arrays.update(init_split_linear(rng, f"enc.up{level}", seg_h, seg_v, H, C, cfg.uses_biases))
        if C:
            arrays[f"enc.up{level}.W_q"] = rng.uniform(-np.sqrt(1.0 / C), np.sqrt(1.0 / C), size=(1, C))
    for level in range(cfg.levels):
        seg_h, seg_v = _edge_segments(_center_widths(cfg), (H, C), _geo_widths(cfg))
        arrays.update(_init_edge_mlp(rng, f"agg{level}", cfg, seg_h, seg_v))
    D, Z = cfg.decoder_width, cfg.latent_dim

    def lin(name, out_dim, in_dim):
        a = np.sqrt(1.0 / in_dim)
        arrays[f"{name}.W"] = rng.uniform(-a, a, size=(out_dim, in_dim))
        arrays[f"{name}.b"] = np.zeros(out_dim)

    if cfg.mode == "plain":
        lin("dec.fc_p", D, 3)
    for i in range(cfg.decoder_blocks):
        lin(f"dec.fc_c{i}", D, Z)
        lin(f"dec.block{i}.fc0", D, D)
        lin(f"dec.block{i}.fc1", D, D)
    lin("dec.fc_out", 1, D)
    return ModelParameters(cfg, arrays)


def zero_decoder(theta: ModelParameters) -> ModelParameters:
    """Copy of ``theta`` with every decoder weight and bias set to zero."""
    out = theta.copy()
    for k in out.arrays:
        if k.startswith("dec."):
            out.arrays[k][...] = 0.0
    return out


# ------------------------------------------------------------ forward


@dataclass
class MultiScaleFeatures:
    points: list[np.ndarray]
    feats: list[HybridFeature]
    indices: list[np.ndarray]  # level l rows as indices into level l-1 (level 0: arange)


def _edge_conv(
    params: Mapping[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    ctr: HybridFeature | None,
    nbr: HybridFeature | None,
    nbr_idx: np.ndarray,
    disp: np.ndarray,
    dtype,
) -> HybridFeature:
    """Two hybrid layers over edges ``(row, nbr_idx[row, j])`` then pooling over ``j``."""
    m, kk = nbr_idx.shape
    norm = cfg.normalized
    segs = []
    if ctr is not None and (ctr.h is not None or ctr.V is not None):
        segs.append(Segment("ctr", ctr, np.broadcast_to(np.arange(m)[:, None], (m, kk))))
    if nbr is not None and (nbr.h is not None or nbr.V is not None):
        segs.append(Segment("nbr", nbr, nbr_idx))
    d = disp.astype(dtype, copy=False)
    if cfg.mode == "plain":
        segs.append(Segment("geo", HybridFeature(dc.constant(d), None)))
    else:
        segs.append(Segment("geo", HybridFeature(None, dc.constant(d[..., None]))))
    f = split_hybrid_linear(segs, params, f"{prefix}.l1", norm)
    f = hybrid_act(f, params.get(f"{prefix}.l1.W_q"))
    f = split_hybrid_linear([Segment("in", f)], params, f"{prefix}.l2", norm)
    f = hybrid_act(f, params.get(f"{prefix}.l2.W_q"))
    h = None if f.h is None else dc.max_reduce(f.h, axis=1)
    V = None if f.V is None else dc.mean_reduce(f.V, axis=1)
    return HybridFeature(h, V)


def _coordinate_feature(cfg: ModelConfig, P: np.ndarray, dtype) -> HybridFeature | None:
    if cfg.mode == "plain":
        return HybridFeature(dc.constant(P.astype(dtype)), None)
    if cfg.mode == "so3":
        return HybridFeature(None, dc.constant(P.astype(dtype)[:, :, None]))
    return None


def _take_rows(f: HybridFeature, idx: np.ndarray) -> HybridFeature:
    return HybridFeature(
        None if f.h is None else dc.gather_rows(f.h, idx),
        None if f.V is None else dc.gather_rows(f.V, idx),
    )


def encode_points(X, params: Mapping[str, Tensor], cfg: ModelConfig, dtype=np.float64) -> MultiScaleFeatures:
    P0 = as_cloud(X)
    sizes = level_sizes(P0.shape[0], cfg.fractions)
    points, down, indices = [P0], [], [np.arange(P0.shape[0])]
    prev = _coordinate_feature(cfg, P0, dtype)
    for level, n in enumerate(sizes):
        if level > 0:
            P_prev = points[-1]
            sel = farthest_point_sample(P_prev, n, start=fps_start_index(P_prev))
            points.append(P_prev[sel])
            indices.append(sel)
            prev = _take_rows(down[-1], sel)
        P = points[-1]
        nbr_idx = knn_indices(P, P, cfg.k)
        disp = P[nbr_idx] - P[:, None, :]
        down.append(_edge_conv(params, f"enc.down{level}", cfg, prev, prev, nbr_idx, disp, dtype))
    feats = [None] * len(down)
    feats[-1] = down[-1]
    for level in range(len(down) - 2, -1, -1):
        nn = knn_indices(points[level], points[level + 1], 1)[:, 0]
        segs = [Segment("coarse", feats[level + 1], nn), Segment("skip", down[level])]
        f = split_hybrid_linear(segs, params, f"enc.up{level}", cfg.normalized)
        feats[level] = hybrid_act(f, params.get(f"enc.up{level}.W_q"))
    return MultiScaleFeatures(points, feats, indices)


def aggregate_latent(queries, feats: MultiScaleFeatures, params: Mapping[str, Tensor], cfg: ModelConfig, dtype=np.float64) -> Tensor:
    """Invariant local latent for each query row, ``(Q, latent_dim)``."""
    p = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    ctr = _coordinate_feature(cfg, p, dtype)
    hs, Vs = [], []
    for level, (P, f) in enumerate(zip(feats.points, feats.feats)):
        if P.shape[0] == 0:
            raise ValueError(f"sampling level {level} holds no points")
        nbr_idx = knn_indices(p, P, cfg.k)
        disp = P[nbr_idx] - p[:, None, :]
        z = _edge_conv(params, f"agg{level}", cfg, ctr, f, nbr_idx, disp, dtype)
        if z.h is not None:
            hs.append(z.h)
        if z.V is not None:
            Vs.append(z.V)
    parts = []
    if Vs:
        parts.append(invariance_map(dc.concat(Vs, axis=-1), cfg.normalized))
    parts.extend(hs)
    return dc.concat(parts, axis=-1)


def _dense(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return dc.add(dc.matmul(x, dc.transpose(params[f"{name}.W"])), params[f"{name}.b"])


def decode_occupancy(z: Tensor, queries, params: Mapping[str, Tensor], cfg: ModelConfig, dtype=np.float64) -> Tensor:
    """Occupancy probabilities ``(Q,)``.  Only plain mode reads the query coordinates."""
    net = None
    if cfg.mode == "plain":
        p = np.asarray(queries, dtype=dtype).reshape(-1, 3)
        net = _dense(dc.constant(p), params, "dec.fc_p")
    for i in range(cfg.decoder_blocks):
        c = _dense(z, params, f"dec.fc_c{i}")
        net = c if net is None else dc.add(net, c)
        dx = _dense(dc.relu(net), params, f"dec.block{i}.fc0")
        dx = _dense(dc.relu(dx), params, f"dec.block{i}.fc1")
        net = dc.add(net, dx)
    out = _dense(dc.relu(net), params, "dec.fc_out")
    return dc.sigmoid(dc.reshape(out, (out.shape[0],)))


def forward_tensors(X, queries, params: Mapping[str, Tensor], cfg: ModelConfig, dtype=np.float64, chunk: int | None = None) -> Tensor:
    """Differentiable forward; returns a ``(Q,)`` probability tensor."""
    feats = encode_points(X, params, cfg, dtype)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if chunk is None or q.shape[0] <= chunk:
        return decode_occupancy(aggregate_latent(q, feats, params, cfg, dtype), q, params, cfg, dtype)
    outs = []
    for lo in range(0, q.shape[0], chunk):
        qc = q[lo : lo + chunk]
        outs.append(decode_occupancy(aggregate_latent(qc, feats, params, cfg, dtype), qc, params, cfg, dtype))
    return dc.concat(outs, axis=0)


def model_forward(X, queries, theta: ModelParameters, chunk: int = 2048) -> np.ndarray:
    """Occupancy probabilities for ``queries`` given cloud ``X`` (no gradients)."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if q.shape[0] == 0:
        return np.zeros(0)
    params = theta.tensors()
    with dc.finite_checks(False):
        feats = encode_points(X, params, theta.config)
        outs = []
        for lo in range(0, q.shape[0], chunk):
            qc = q[lo : lo + chunk]
            z = aggregate_latent(qc, feats, params, theta.config)
            outs.append(decode_occupancy(z, qc, params, theta.config).data)
    out = np.concatenate(outs)
    if not np.all(np.isfinite(out)):
        raise dc.NonFiniteError("model produced non-finite occupancy")
    return out


def with_mode(cfg: ModelConfig, mode: str) -> ModelConfig:
    """Same channel plan in a different mode (plain falls back to its defaults)."""
    if mode == "plain" or cfg.mode == "plain":
        return replace(cfg, mode=mode, hidden_h=None, hidden_v=None)
    return replace(cfg, mode=mode)
