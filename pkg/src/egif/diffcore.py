"""Minimal reverse-mode autodiff over dense numpy arrays.

Every op is a function of :class:`Tensor` inputs returning a new
:class:`Tensor`.  When a :class:`Tape` is active (``with Tape() as tape``)
and at least one input requires a gradient, the op appends a
:class:`TapeNode` holding a vector-Jacobian closure.  :func:`backward`
walks the tape in reverse and returns gradients keyed by parameter name.

Broadcasting follows numpy for the elementwise ops; gradients are summed
back onto the broadcast operand.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy import sparse

EPS_NORM = 1e-12

KINDS = frozenset(
    {
        "matmul",
        "add",
        "subtract",
        "channelwise_multiply",
        "safe_normalize",
        "relu",
        "sigmoid",
        "mean_reduce",
        "max_reduce",
        "concat",
        "gather_rows",
        "scalar_multiply",
        "inner_product_rows",
        # structural / loss helpers
        "transpose",
        "reshape",
        "bce",
    }
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A dense array node.  Parameters carry a ``name`` and ``requires_grad``."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype(data))
        if _state.check_finite and arr.size and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar, kept thin
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_multiply(self, other)
        return channelwise_multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64, np.longdouble):
        return data.dtype
    return np.float64


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    closed: bool = False

    def __enter__(self) -> "Tape":
        if _state.tape is not None:
            raise RuntimeError("nested tapes are not supported")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None
        self.closed = True


class _State(threading.local):
    def __init__(self):
        self.tape: Tape | None = None
        self.check_finite = True


_state = _State()


@contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Toggle the per-op finiteness guard for the current thread."""
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    out.requires_grad = needs and _state.tape is not None
    if out.requires_grad:
        _state.tape.nodes.append(TapeNode(kind, inputs, out, vjp))
    return out


def _check_inputs(kind: str, *arrays: np.ndarray) -> None:
    if not _state.check_finite:
        return
    for a in arrays:
        if a.size and not np.isfinite(a).all():
            raise NonFiniteError(f"{kind}: non-finite input")


def _sum_axis(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    # numpy reduces short strided axes slowly; add slices instead
    n = x.shape[axis]
    if 1 < n <= 4:
        sl = [slice(None)] * x.ndim
        parts = []
        for i in range(n):
            sl[axis] = slice(i, i + 1) if keepdims else i
            parts.append(x[tuple(sl)])
        out = parts[0] + parts[1]
        for p in parts[2:]:
            out += p
        return out
    return x.sum(axis=axis, keepdims=keepdims)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = _sum_axis(grad, i, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- primitives


ROW_BLOCK = 256


def _rows_matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A @ B`` whose rows do not depend on how many rows ``A`` has.

    OpenBLAS picks different kernels (gemv for one row, a small-matrix
    kernel for few rows) that sum in different orders.  Running every row
    inside a zero-padded block of exactly ``ROW_BLOCK`` rows keeps batched,
    chunked and single-query evaluation bit-identical.
    """
    M = A.shape[0]
    nb = -(-M // ROW_BLOCK)
    if nb * ROW_BLOCK == M:
        P = A
    else:
        P = np.zeros((nb * ROW_BLOCK, A.shape[1]), dtype=np.result_type(A, B))
        P[:M] = A
    out = np.matmul(P.reshape(nb, ROW_BLOCK, A.shape[1]), B)
    return out.reshape(nb * ROW_BLOCK, B.shape[1])[:M]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``.  A 2-D ``b`` is applied to the last axis of a batched ``a``."""
    vec = b.ndim == 1 and a.ndim == 2
    if a.ndim < 1 or not vec and b.ndim != 2 and a.ndim != b.ndim:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.shape[-1] != b.shape[0 if b.ndim <= 2 else -2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _check_inputs("matmul", a.data, b.data)
    A, B = a.data, b.data
    if B.ndim == 1 and A.ndim == 2:
        out = A @ B

        def vjp(g):
            ga = np.outer(g, B) if a.requires_grad else None
            gb = A.T @ g if b.requires_grad else None
            return ga, gb

    elif B.ndim == 2:
        lead = A.shape[:-1]
        A2 = A.reshape(-1, A.shape[-1])
        out = _rows_matmul(A2, B).reshape(lead + (B.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, B.shape[1])
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A2.T @ g2 if b.requires_grad else None
            return ga, gb

    else:
        out = np.matmul(A, B)

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(B, -1, -2)) if a.requires_grad else None
            gb = np.matmul(np.swapaxes(A, -1, -2), g) if b.requires_grad else None
            return ga, gb

    return _record("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    _check_inputs("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", (a, b), a.data + b.data, vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("subtract", a, b)
    _check_inputs("subtract", a.data, b.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record("subtract", (a, b), a.data - b.data, vjp)


def channelwise_multiply(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("channelwise_multiply", a, b)
    _check_inputs("channelwise_multiply", a.data, b.data)
    A, B = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _record("channelwise_multiply", (a, b), A * B, vjp)


def scalar_multiply(a: Tensor, c: float) -> Tensor:
    _check_inputs("scalar_multiply", a.data)
    c = float(c)
    return _record("scalar_multiply", (a,), a.data * c, lambda g: (g * c,))


def safe_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """``x / ||x||`` along ``axis``; zero (and zero gradient) where ``||x|| < 1e-12``."""
    _check_inputs("safe_normalize", x.data)
    X = x.data
    norm = np.sqrt((X * X).sum(axis=axis, keepdims=True))
    live = norm >= EPS_NORM
    inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0).astype(X.dtype, copy=False)
    y = X * inv

    def vjp(g):
        return ((g - y * (y * g).sum(axis=axis, keepdims=True)) * inv,)

    return _record("safe_normalize", (x,), y, vjp)


def relu(x: Tensor) -> Tensor:
    _check_inputs("relu", x.data)
    # x >= 0 counts as active, also for the subgradient
    mask = x.data >= 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _check_inputs("sigmoid", x.data)
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def mean_reduce(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_inputs("mean_reduce", x.data)
    X = x.data
    if axis is None:
        n = X.size
        if n == 0:
            raise ShapeError("mean_reduce: empty tensor")
        out = np.asarray(X.mean(), dtype=X.dtype)

        def vjp(g):
            return (np.full(X.shape, g / n, dtype=X.dtype),)

        return _record("mean_reduce", (x,), out, vjp)
    n = X.shape[axis]
    if n == 0:
        raise ShapeError(f"mean_reduce: empty axis {axis} in shape {X.shape}")
    out = X.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, X.shape).copy(),)

    return _record("mean_reduce", (x,), out, vjp)


def max_reduce(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the lowest index among ties."""
    _check_inputs("max_reduce", x.data)
    X = x.data
    if X.shape[axis] == 0:
        raise ShapeError(f"max_reduce: empty axis {axis} in shape {X.shape}")
    arg = np.expand_dims(np.argmax(X, axis=axis), axis)
    out = np.take_along_axis(X, arg, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(X)
        np.put_along_axis(gx, arg, g, axis=axis)
        return (gx,)

    return _record("max_reduce", (x,), out, vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: shapes {xs[0].shape} and {t.shape} do not conform on axis {axis}")
    _check_inputs("concat", *(t.data for t in xs))
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def vjp(g):
        sl = [slice(None)] * nd
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return grads

    return _record("concat", xs, out, vjp)


def gather_rows(x: Tensor, index) -> Tensor:
    """``x[index]`` along axis 0; ``index`` is any integer array."""
    idx = np.asarray(index, dtype=np.intp)
    X = x.data
    if idx.size and (idx.min() < 0 or idx.max() >= X.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {X.shape}")
    _check_inputs("gather_rows", X)
    out = X[idx]

    def vjp(g):
        rest = X.shape[1:]
        width = int(np.prod(rest)) if rest else 1
        flat = idx.ravel()
        g2 = g.reshape(flat.size, width)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(X.shape[0], flat.size)
        )
        return (np.asarray(scatter @ g2).reshape(X.shape),)

    return _record("gather_rows", (x,), out, vjp)


def inner_product_rows(a: Tensor, b: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """``sum(a * b, axis)`` with broadcasting between ``a`` and ``b``."""
    _broadcast_shape("inner_product_rows", a, b)
    _check_inputs("inner_product_rows", a.data, b.data)
    A, B = a.data, b.data
    ax = axis % max(A.ndim, B.ndim)
    if A.ndim == B.ndim and ax >= A.ndim - 2:
        Ab, Bb = np.broadcast_arrays(A, B)
        spec = "...ij,...ij->...j" if ax == A.ndim - 2 else "...j,...j->..."
        out = np.einsum(spec, Ab, Bb)
        if keepdims:
            out = np.expand_dims(out, ax)
    else:
        out = _sum_axis(A * B, axis, keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return ga, gb

    return _record("inner_product_rows", (a, b), out, vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: needs rank >= 2, got {x.shape}")
    return _record("transpose", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


def bce(pred: Tensor, target, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} targets."""
    y = np.asarray(target, dtype=pred.data.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"bce: shapes {pred.shape} and {y.shape} do not conform")
    if pred.data.size == 0:
        raise ShapeError("bce: empty input")
    _check_inputs("bce", pred.data, y)
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
    inside = (pred.data > clamp) & (pred.data < 1.0 - clamp)

    def vjp(g):
        return (g * inside * (p - y) / (p * (1.0 - p)) / n,)

    return _record("bce", (pred,), np.asarray(loss, dtype=pred.data.dtype), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "channelwise_multiply": channelwise_multiply,
    "safe_normalize": safe_normalize,
    "relu": relu,
    "sigmoid": sigmoid,
    "mean_reduce": mean_reduce,
    "max_reduce": max_reduce,
    "concat": lambda *xs, **kw: concat(xs, **kw),
    "gather_rows": gather_rows,
    "scalar_multiply": scalar_multiply,
    "inner_product_rows": inner_product_rows,
    "transpose": transpose,
    "reshape": reshape,
    "bce": bce,
}


def primitive_forward(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each parameter.

    Parameters not reachable from ``loss`` get zero arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {p.name: p for p in params}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for name, p in named.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
    return out


def finite_difference_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    numeric_dtype=np.float64,
) -> tuple[float, str | None]:
    """Compare :func:`backward` against central differences.

    ``fn`` maps a dict of parameter tensors to a scalar tensor.  Returns the
    max relative error (denominator ``max(|a|, |b|, 1e-8)``) and a
    description of the worst entry if it exceeds ``tolerance``.

    ``numeric_dtype=np.longdouble`` evaluates the differences in extended
    precision, which removes float64 cancellation noise (about
    ``1e-16 * |f| / step``) from entries whose gradient is tiny.  ``fn``
    must then keep the dtype of the tensors it is given.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    params = {k: param(v, k) for k, v in base.items()}
    with Tape() as tape:
        loss = fn(params)
    analytic = backward(tape, loss, params)
    wide = {k: v.astype(numeric_dtype) for k, v in base.items()}

    def f(arrs):
        return fn({k: Tensor(v) for k, v in arrs.items()}).data

    worst, where = 0.0, None
    for name, arr in wide.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(wide)
            flat[i] = orig - step
            fm = f(wide)
            flat[i] = orig
            num = float((fp - fm) / (2 * numeric_dtype(step)))
            ana = float(analytic[name].reshape(-1)[i])
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            if rel > worst:
                worst = rel
                where = f"{name}[{np.unravel_index(i, arr.shape)}]: analytic={ana:.6e} numeric={num:.6e}"
    return worst, (where if worst > tolerance else None)
