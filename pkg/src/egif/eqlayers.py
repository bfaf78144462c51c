"""Hybrid scalar/vector equivariant layers.

A hybrid feature pairs an invariant scalar block ``h`` of shape
``(..., C_h)`` with an equivariant vector block ``V``.  ``V`` is stored
channels-last, ``(..., 3, C_v)``: column ``c`` is the 3-vector of channel
``c``.  A rotation ``Q`` and scale ``s`` act on it as ``s * Q @ V``.

With this layout a channel-mixing matrix ``W`` (out x in) is applied as
``V @ W.T``, one BLAS call over all leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class HybridFeature:
    h: Tensor | None
    V: Tensor | None

    @property
    def c_h(self) -> int:
        return 0 if self.h is None else self.h.shape[-1]

    @property
    def c_v(self) -> int:
        return 0 if self.V is None else self.V.shape[-1]


@dataclass
class HybridLinearWeights:
    """``W_h`` (C_h' x C_h), ``W_v`` (C_v' x C_v), ``W_hv`` (C_v' x C_h), ``W_vh`` (C_h' x C_v).

    Blocks whose input or output width is zero are ``None``.
    """

    W_h: Tensor | None = None
    W_v: Tensor | None = None
    W_hv: Tensor | None = None
    W_vh: Tensor | None = None
    bias: Tensor | None = None


def vectors_to_block(vectors) -> np.ndarray:
    """``(C_v, 3)`` list of vectors -> ``(3, C_v)`` block (leading axes kept)."""
    return np.swapaxes(np.asarray(vectors, dtype=np.float64), -1, -2)


def block_to_vectors(block) -> np.ndarray:
    return np.swapaxes(np.asarray(block), -1, -2)


def _lin(x: Tensor, W: Tensor) -> Tensor:
    return dc.matmul(x, dc.transpose(W))


def invariance_map(V: Tensor, normalized: bool = False) -> Tensor:
    """Inner product of each channel with the unit channel-mean direction.

    ``normalized`` additionally divides the result by its own norm, which
    removes the dependence on a global scale.
    """
    mean_dir = dc.safe_normalize(dc.mean_reduce(V, axis=-1, keepdims=True), axis=-2)
    omega = dc.inner_product_rows(V, mean_dir, axis=-2)
    if normalized:
        omega = dc.safe_normalize(omega, axis=-1)
    return omega


def _sum(terms: Sequence[Tensor]) -> Tensor | None:
    out = None
    for t in terms:
        out = t if out is None else dc.add(out, t)
    return out


def _gate(V: Tensor, pre_gate: Tensor) -> Tensor:
    g = dc.safe_normalize(pre_gate, axis=-1)
    shape = g.shape[:-1] + (1, g.shape[-1])
    return dc.channelwise_multiply(V, dc.reshape(g, shape))


def hybrid_linear(f: HybridFeature, W: HybridLinearWeights, normalized: bool = False) -> HybridFeature:
    """``h' = W_h h + W_vh Ω(V)``; ``V' = (W_v V) ⊙ (W_hv h / ||W_hv h||)``.

    Without scalar inputs there is nothing to gate with and ``V' = W_v V``.
    """
    h_terms = []
    if f.h is not None and W.W_h is not None:
        h_terms.append(_lin(f.h, W.W_h))
    if f.V is not None and W.W_vh is not None:
        h_terms.append(_lin(invariance_map(f.V, normalized), W.W_vh))
    h = _sum(h_terms)
    if h is not None and W.bias is not None:
        h = dc.add(h, W.bias)
    V = None
    if f.V is not None and W.W_v is not None:
        V = _lin(f.V, W.W_v)
        if f.h is not None and W.W_hv is not None:
            V = _gate(V, _lin(f.h, W.W_hv))
    return HybridFeature(h, V)


def vec_relu(V: Tensor, W_q: Tensor) -> Tensor:
    """Vector ReLU against the learnt direction ``q = V @ W_q.T``.

    Channels with a negative component along ``q`` lose that component;
    a zero inner product keeps the channel unchanged.
    """
    q_hat = dc.safe_normalize(_lin(V, W_q), axis=-2)
    dot = dc.inner_product_rows(V, q_hat, axis=-2, keepdims=True)
    # min(dot, 0) written so that dot == 0 takes the identity branch
    neg = dc.subtract(dot, dc.relu(dot))
    return dc.subtract(V, dc.channelwise_multiply(q_hat, neg))


def scalar_relu(h: Tensor) -> Tensor:
    return dc.relu(h)


def hybrid_act(f: HybridFeature, W_q: Tensor | None) -> HybridFeature:
    h = None if f.h is None else scalar_relu(f.h)
    V = None if f.V is None else vec_relu(f.V, W_q)
    return HybridFeature(h, V)


# ------------------------------------------------------------ split inputs


@dataclass
class Segment:
    """One input block of a linear layer over concatenated inputs.

    ``index`` maps every output row to a row of ``feat`` (``None``: rows
    already line up).  Linear maps commute with row gathers, so each block is
    transformed at its own resolution before being gathered.
    """

    name: str
    feat: HybridFeature
    index: np.ndarray | None = None


def _take(x: Tensor, index) -> Tensor:
    return x if index is None else dc.gather_rows(x, index)


def split_hybrid_linear(
    segments: Sequence[Segment],
    params: Mapping[str, Tensor],
    prefix: str,
    normalized: bool = False,
) -> HybridFeature:
    """:func:`hybrid_linear` over the channel-concatenation of ``segments``.

    Weights are stored per segment (``{prefix}.W_h.{name}`` etc.); ``W_vh``
    acts on the invariant of the full concatenated vector block.
    """
    h_terms, g_terms, v_terms, v_raw = [], [], [], []
    for s in segments:
        if s.feat.h is not None:
            key = f"{prefix}.W_h.{s.name}"
            if key in params:
                h_terms.append(_take(_lin(s.feat.h, params[key]), s.index))
            key = f"{prefix}.W_hv.{s.name}"
            if key in params:
                g_terms.append(_take(_lin(s.feat.h, params[key]), s.index))
        if s.feat.V is not None:
            key = f"{prefix}.W_v.{s.name}"
            if key in params:
                v_terms.append(_take(_lin(s.feat.V, params[key]), s.index))
            v_raw.append(_take(s.feat.V, s.index))
    key = f"{prefix}.W_vh"
    if v_raw and key in params:
        h_terms.append(_lin(invariance_map(dc.concat(v_raw, axis=-1), normalized), params[key]))
    h = _sum(h_terms)
    if h is not None and f"{prefix}.bias" in params:
        h = dc.add(h, params[f"{prefix}.bias"])
    V = _sum(v_terms)
    if V is not None and g_terms:
        V = _gate(V, _sum(g_terms))
    return HybridFeature(h, V)


# ---------------------------------------------------------------- init


def _uniform(rng: np.random.Generator, out_dim: int, in_dim: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-a, a, size=(out_dim, in_dim))


def init_split_linear(
    rng: np.random.Generator,
    prefix: str,
    seg_h: Sequence[tuple[str, int]],
    seg_v: Sequence[tuple[str, int]],
    c_h_out: int,
    c_v_out: int,
    bias: bool = False,
) -> dict[str, np.ndarray]:
    """Per-segment weights; uniform in ``±sqrt(1/fan_in)`` of the full matrix."""
    c_h_in = sum(c for _, c in seg_h)
    c_v_in = sum(c for _, c in seg_v)
    out: dict[str, np.ndarray] = {}
    for name, c in seg_h:
        if c_h_out:
            out[f"{prefix}.W_h.{name}"] = _uniform(rng, c_h_out, c, c_h_in)
        if c_v_out and c_v_in:
            out[f"{prefix}.W_hv.{name}"] = _uniform(rng, c_v_out, c, c_h_in)
    for name, c in seg_v:
        if c_v_out:
            out[f"{prefix}.W_v.{name}"] = _uniform(rng, c_v_out, c, c_v_in)
    if c_h_out and c_v_in:
        out[f"{prefix}.W_vh"] = _uniform(rng, c_h_out, c_v_in, c_v_in)
    if bias and c_h_out:
        out[f"{prefix}.bias"] = np.zeros(c_h_out)
    return out


def init_hybrid_linear(
    rng: np.random.Generator, c_h_in: int, c_v_in: int, c_h_out: int, c_v_out: int
) -> dict[str, np.ndarray]:
    """Plain (unsplit) weight blocks keyed ``W_h``, ``W_v``, ``W_hv``, ``W_vh``."""
    out = {}
    if c_h_in and c_h_out:
        out["W_h"] = _uniform(rng, c_h_out, c_h_in, c_h_in)
    if c_v_in and c_v_out:
        out["W_v"] = _uniform(rng, c_v_out, c_v_in, c_v_in)
    if c_h_in and c_v_out and c_v_in:
        out["W_hv"] = _uniform(rng, c_v_out, c_h_in, c_h_in)
    if c_v_in and c_h_out:
        out["W_vh"] = _uniform(rng, c_h_out, c_v_in, c_v_in)
    return out


def weights_from(params: Mapping[str, Tensor], prefix: str = "") -> HybridLinearWeights:
    p = f"{prefix}." if prefix else ""
    return HybridLinearWeights(
        W_h=params.get(f"{p}W_h"),
        W_v=params.get(f"{p}W_v"),
        W_hv=params.get(f"{p}W_hv"),
        W_vh=params.get(f"{p}W_vh"),
        bias=params.get(f"{p}bias"),
    )
