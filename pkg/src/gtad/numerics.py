"""Dense fp64 tensors with a reverse-mode tape, sampling kernels, and seeded RNG.

Everything downstream (encoders, denoiser, heads) is built from the op
vocabulary in this module.  Design constraints:

* float64 everywhere; speed is secondary at desk scale.
* Tensors are immutable values after construction.  The tape is
  single-writer: one training step runs on one logical thread.
* Any op that could turn finite inputs into NaN/Inf runs under a raising
  errstate, so non-finite values surface as :class:`NonFiniteError`
  instead of propagating.
* ``matmul_fixed_order`` keeps a deterministic per-element summation
  order so batched results are bitwise identical to single-row calls
  (BLAS matmul is not row-stable; the deformable-attention kernels need
  row stability).

Checkpoint files use the ``GTADCKPT v1`` format: a header line, then per
parameter one text line ``name ndim d0 d1 ...`` followed by the raw
little-endian float64 payload.  Round trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import itertools
from contextlib import contextmanager

import numpy as np


class NumericsError(ValueError):
    """Base class for tensor-library errors."""


class ShapeError(NumericsError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(NumericsError):
    """An operation produced (or received) NaN or Inf."""


_GRAD_ENABLED = True
_ERRSTATE = {"over": "raise", "invalid": "raise", "divide": "raise"}


@contextmanager
def autograd_off():
    """Skip tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense row-major float64 array plus optional tape bookkeeping.

    ``requires_grad`` marks leaves that should accumulate ``.grad`` during
    :func:`backward`.  Interior nodes inherit the flag from their parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")
    _counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._order = next(Tensor._counter)

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Named leaf tensor; always participates in differentiation."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        if not name or " " in name or "\n" in name:
            raise NumericsError(f"invalid parameter name {name!r}")
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Tensor that never requires grad (wraps plain arrays/scalars)."""
    return _wrap(x)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Internal node constructor; skips the user-facing finite check.

    Finiteness is maintained inductively: inputs are finite and every op
    body runs under a raising errstate.
    """
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t._order = next(Tensor._counter)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out = a.data / b.data

    def bwd(g):
        with np.errstate(**_ERRSTATE):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(**_ERRSTATE):
        out = np.log(a.data)

    def bwd(g):
        with np.errstate(**_ERRSTATE):
            return (g / a.data,)

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # single exp of a non-positive argument; never overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(a: Tensor) -> Tensor:
    # stable form max(x, 0) + log1p(exp(-|x|)); the exp is reused by the
    # backward sigmoid
    z = np.exp(-np.abs(a.data))
    out = np.maximum(a.data, 0.0) + np.log1p(z)

    def bwd(g):
        sig = np.where(a.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
        return (g * sig,)

    return _make(out, (a,), bwd)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a fixed float exponent.

    Exponents 0 and 1 are special-cased so their gradients stay defined at
    ``a == 0``.  Fractional exponents with zero base are outside contract.
    """
    exponent = float(exponent)
    if exponent == 0.0:
        out = np.ones_like(a.data)

        def bwd0(g):
            return (np.zeros_like(a.data),)

        return _make(out, (a,), bwd0)
    if exponent == 1.0:
        def bwd1(g):
            return (g,)

        return _make(a.data.copy(), (a,), bwd1)

    with np.errstate(**_ERRSTATE):
        out = a.data ** exponent

    def bwd(g):
        with np.errstate(**_ERRSTATE):
            return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / count))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    out = a.data.T.copy()

    def bwd(g):
        return (g.T,)

    return _make(out, (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)
    else:
        out = out.copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(out, (a,), bwd)


def take1d(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from a 1-D tensor at fixed integer indices (repeats allowed)."""
    if a.ndim != 1:
        raise ShapeError(f"take1d expects a 1-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bwd)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor at fixed integer indices (repeats allowed)."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bwd)


def permute(a: Tensor, axes) -> Tensor:
    """Reorder axes (np.transpose with an explicit axis permutation)."""
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation of {a.ndim} dims")
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(out, (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _make(out, tuple(tensors), bwd)


def repeat_axis(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice ``repeats`` times along ``axis`` (nearest upsample)."""
    axis = axis % a.ndim
    out = np.repeat(a.data, repeats, axis=axis)

    def bwd(g):
        shp = a.shape[:axis] + (a.shape[axis], repeats) + a.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul family
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n] (BLAS-backed)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    with np.errstate(**_ERRSTATE):
        out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def matmul_fixed_order(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed per-element summation order.

    Accumulates over the inner dimension sequentially, so row i of the
    result is bitwise identical whether computed in a batch of N rows or
    alone.  Use for kernels that promise batch/scalar bit equality;
    roughly 20x slower than BLAS, intended for small inner dims.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    k = a.shape[1]
    with np.errstate(**_ERRSTATE):
        out = np.zeros((a.shape[0], b.shape[1]))
        for j in range(k):
            out += a.data[:, j : j + 1] * b.data[j]

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x[..., din] @ w[din, dout] (+ bias)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: trailing dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    if bias is not None:
        out = add(out, bias)
    if x.ndim != 2:
        out = reshape(out, lead + (w.shape[1],))
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax; outputs are positive and sum to 1 along ``axis``."""
    axis = axis % a.ndim if a.ndim else 0
    with np.errstate(**_ERRSTATE):
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.ndim if a.ndim else 0
    with np.errstate(**_ERRSTATE):
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# sampling kernels
# ---------------------------------------------------------------------------

def _corner_weights_1d(coord: np.ndarray, extent: int):
    """Floor corner index, fraction, and in-bounds masks for both corners."""
    lo = np.floor(coord)
    frac = coord - lo
    lo_i = lo.astype(np.int64)
    hi_i = lo_i + 1
    lo_ok = (lo_i >= 0) & (lo_i <= extent - 1)
    hi_ok = (hi_i >= 0) & (hi_i <= extent - 1)
    return lo_i, hi_i, frac, lo_ok, hi_ok


def bilinear_sample(value_map: Tensor, points) -> Tensor:
    """Bilinear interpolation of value_map[H, W, C] at continuous (x, y).

    ``points`` is [P, 2] with x along the width axis and y along the height
    axis.  Out-of-bounds corners contribute zero, so samples fully outside
    [0, W-1] x [0, H-1] return zero vectors.  Differentiable with respect
    to both the map and the points.
    """
    pts = points if isinstance(points, Tensor) else constant(points)
    if value_map.ndim != 3 or pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample expects map [H,W,C] and points [P,2], got {value_map.shape} and {pts.shape}"
        )
    h, w, _ = value_map.shape
    x = pts.data[:, 0]
    y = pts.data[:, 1]
    x0, x1, tx, x0_ok, x1_ok = _corner_weights_1d(x, w)
    y0, y1, ty, y0_ok, y1_ok = _corner_weights_1d(y, h)

    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y1, 0, h - 1)

    m = value_map.data
    v00 = m[y0c, x0c] * (y0_ok & x0_ok)[:, None]
    v10 = m[y0c, x1c] * (y0_ok & x1_ok)[:, None]
    v01 = m[y1c, x0c] * (y1_ok & x0_ok)[:, None]
    v11 = m[y1c, x1c] * (y1_ok & x1_ok)[:, None]

    txc = tx[:, None]
    tyc = ty[:, None]
    with np.errstate(**_ERRSTATE):
        out = (
            v00 * (1.0 - txc) * (1.0 - tyc)
            + v10 * txc * (1.0 - tyc)
            + v01 * (1.0 - txc) * tyc
            + v11 * txc * tyc
        )

    def bwd(g):
        gm = np.zeros_like(m)
        w00 = g * ((1.0 - txc) * (1.0 - tyc) * (y0_ok & x0_ok)[:, None])
        w10 = g * (txc * (1.0 - tyc) * (y0_ok & x1_ok)[:, None])
        w01 = g * ((1.0 - txc) * tyc * (y1_ok & x0_ok)[:, None])
        w11 = g * (txc * tyc * (y1_ok & x1_ok)[:, None])
        np.add.at(gm, (y0c, x0c), w00)
        np.add.at(gm, (y0c, x1c), w10)
        np.add.at(gm, (y1c, x0c), w01)
        np.add.at(gm, (y1c, x1c), w11)
        # d out / d tx and d out / d ty, contracted with g over channels
        d_tx = (-v00 * (1.0 - tyc) + v10 * (1.0 - tyc) - v01 * tyc + v11 * tyc)
        d_ty = (-v00 * (1.0 - txc) - v10 * txc + v01 * (1.0 - txc) + v11 * txc)
        gp = np.stack([(g * d_tx).sum(axis=1), (g * d_ty).sum(axis=1)], axis=1)
        return gm, gp

    return _make(out, (value_map, pts), bwd)


def bilinear_sample_multi(maps: Tensor, map_idx: np.ndarray, points) -> Tensor:
    """Bilinear sampling across a stack of maps [V, H, W, C].

    ``map_idx`` assigns each point to a map; per-point arithmetic is
    identical to :func:`bilinear_sample` on that map, so results match the
    single-map op bitwise row by row.
    """
    pts = points if isinstance(points, Tensor) else constant(points)
    if maps.ndim != 4 or pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample_multi expects maps [V,H,W,C] and points [P,2], "
            f"got {maps.shape} and {pts.shape}"
        )
    midx = np.asarray(map_idx, dtype=np.int64)
    if midx.shape != (pts.shape[0],):
        raise ShapeError(f"map_idx shape {midx.shape} != ({pts.shape[0]},)")
    _, h, w, _ = maps.shape
    x = pts.data[:, 0]
    y = pts.data[:, 1]
    x0, x1, tx, x0_ok, x1_ok = _corner_weights_1d(x, w)
    y0, y1, ty, y0_ok, y1_ok = _corner_weights_1d(y, h)

    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y1, 0, h - 1)

    m = maps.data
    v00 = m[midx, y0c, x0c] * (y0_ok & x0_ok)[:, None]
    v10 = m[midx, y0c, x1c] * (y0_ok & x1_ok)[:, None]
    v01 = m[midx, y1c, x0c] * (y1_ok & x0_ok)[:, None]
    v11 = m[midx, y1c, x1c] * (y1_ok & x1_ok)[:, None]

    txc = tx[:, None]
    tyc = ty[:, None]
    with np.errstate(**_ERRSTATE):
        out = (
            v00 * (1.0 - txc) * (1.0 - tyc)
            + v10 * txc * (1.0 - tyc)
            + v01 * (1.0 - txc) * tyc
            + v11 * txc * tyc
        )

    def bwd(g):
        v, hh, ww, c = m.shape
        chan = np.arange(c, dtype=np.int64)[None, :]
        w00 = g * ((1.0 - txc) * (1.0 - tyc) * (y0_ok & x0_ok)[:, None])
        w10 = g * (txc * (1.0 - tyc) * (y0_ok & x1_ok)[:, None])
        w01 = g * ((1.0 - txc) * tyc * (y1_ok & x0_ok)[:, None])
        w11 = g * (txc * tyc * (y1_ok & x1_ok)[:, None])
        # bincount scatter is several times faster than np.add.at here
        flat = np.concatenate([
            (((midx * hh + yc) * ww + xc) * c)[:, None] + chan
            for yc, xc in ((y0c, x0c), (y0c, x1c), (y1c, x0c), (y1c, x1c))
        ]).ravel()
        weights = np.concatenate([w00, w10, w01, w11]).ravel()
        gm = np.bincount(flat, weights=weights, minlength=m.size).reshape(m.shape)
        d_tx = (-v00 * (1.0 - tyc) + v10 * (1.0 - tyc) - v01 * tyc + v11 * tyc)
        d_ty = (-v00 * (1.0 - txc) - v10 * txc + v01 * (1.0 - txc) + v11 * txc)
        gp = np.stack([(g * d_tx).sum(axis=1), (g * d_ty).sum(axis=1)], axis=1)
        return gm, gp

    return _make(out, (maps, pts), bwd)


def trilinear_sample(volume: Tensor, points) -> Tensor:
    """Trilinear interpolation of volume[D0, D1, D2, C] at fractional indices.

    ``points`` is [P, 3] in index coordinates aligned with the first three
    volume axes.  Out-of-bounds corners contribute zero.  Differentiable
    with respect to the volume and the points.
    """
    pts = points if isinstance(points, Tensor) else constant(points)
    if volume.ndim != 4 or pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(
            f"trilinear_sample expects volume [A,B,C,ch] and points [P,3], got {volume.shape} and {pts.shape}"
        )
    dims = volume.shape[:3]
    idx = []
    for ax in range(3):
        idx.append(_corner_weights_1d(pts.data[:, ax], dims[ax]))

    vol = volume.data
    out = np.zeros((pts.shape[0], volume.shape[3]))
    corner_cache = []
    with np.errstate(**_ERRSTATE):
        for c0 in range(2):
            a_i, a_ok = idx[0][c0], idx[0][3 + c0]
            wa = (1.0 - idx[0][2]) if c0 == 0 else idx[0][2]
            for c1 in range(2):
                b_i, b_ok = idx[1][c1], idx[1][3 + c1]
                wb = (1.0 - idx[1][2]) if c1 == 0 else idx[1][2]
                for c2 in range(2):
                    c_i, c_ok = idx[2][c2], idx[2][3 + c2]
                    wc = (1.0 - idx[2][2]) if c2 == 0 else idx[2][2]
                    ok = (a_ok & b_ok & c_ok)
                    ai = np.clip(a_i, 0, dims[0] - 1)
                    bi = np.clip(b_i, 0, dims[1] - 1)
                    ci = np.clip(c_i, 0, dims[2] - 1)
                    vals = vol[ai, bi, ci] * ok[:, None]
                    wgt = wa * wb * wc
                    out += vals * wgt[:, None]
                    corner_cache.append((ai, bi, ci, ok, vals, c0, c1, c2))

    fracs = [idx[0][2], idx[1][2], idx[2][2]]

    def bwd(g):
        gv = np.zeros_like(vol)
        gp = np.zeros_like(pts.data)
        for ai, bi, ci, ok, vals, c0, c1, c2 in corner_cache:
            signs = (c0, c1, c2)
            w_axes = [(1.0 - fracs[ax]) if signs[ax] == 0 else fracs[ax] for ax in range(3)]
            wgt = w_axes[0] * w_axes[1] * w_axes[2]
            np.add.at(gv, (ai, bi, ci), g * (wgt * ok)[:, None])
            gv_dot = (g * vals).sum(axis=1)
            for ax in range(3):
                others = [w_axes[i] for i in range(3) if i != ax]
                dsign = -1.0 if signs[ax] == 0 else 1.0
                gp[:, ax] += gv_dot * dsign * others[0] * others[1]
        return gv, gp

    return _make(out, (volume, pts), bwd)


# ---------------------------------------------------------------------------
# reverse-mode backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable requires-grad leaf.

    ``loss`` must be a scalar produced by recorded operations.  Gradients
    accumulate into existing ``.grad`` arrays (zero them between steps).
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # creation order is a topological order: parents precede children
    seen = {id(loss)}
    nodes = [loss]
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda t: t._order, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    with np.errstate(**_ERRSTATE):
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            contributions = node._backward(g)
            for parent, contrib in zip(node._parents, contributions):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib


# ---------------------------------------------------------------------------
# deterministic randomness
# ---------------------------------------------------------------------------

_MIX_MASK = (1 << 64) - 1


def _mix64(z: int) -> int:
    """SplitMix64 finalizer; platform-independent integer mixing."""
    z = (z + 0x9E3779B97F4A7C15) & _MIX_MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MIX_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MIX_MASK
    return z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _MIX_MASK
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise NumericsError(f"rng child keys must be int or str, got {type(key)!r}")


class Rng:
    """Seeded random stream; identical seeds give identical draws.

    Streams are PCG64-backed, so the sequence is reproducible across runs
    and platforms for a fixed numpy version.  ``child`` derives independent
    substreams from (seed, keys) without consuming the parent stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MIX_MASK
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys) -> "Rng":
        state = self.seed
        for key in keys:
            state = _mix64(state ^ _key_to_int(key))
        return Rng(state)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# parameter store and checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Registry of named parameters; owns init, grads, and checkpoints."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def param(self, name: str, shape, rng: Rng | None = None,
              scale: float | None = None, init: np.ndarray | None = None) -> Parameter:
        if name in self._params:
            raise NumericsError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init is not None:
            data = np.asarray(init, dtype=np.float64).reshape(shape)
        elif rng is None:
            data = np.zeros(shape)
        else:
            if scale is None:
                fan_in = shape[0] if len(shape) >= 2 else max(shape[0] if shape else 1, 1)
                scale = 1.0 / np.sqrt(fan_in)
            data = rng.normal(shape, scale=scale)
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise NumericsError(
                f"checkpoint/store mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, arr in arrays.items():
            p = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def save(self, path):
        save_checkpoint(self.state_arrays(), path)

    def load(self, path):
        self.load_arrays(load_checkpoint(path))


_CKPT_MAGIC = b"GTADCKPT v1\n"


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> None:
    """Write parameters in GTADCKPT v1 format (sorted by name)."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        for name in sorted(arrays):
            # asarray (not ascontiguousarray) keeps 0-dim scalars 0-dim
            arr = np.asarray(arrays[name], dtype="<f8")
            dims = " ".join(str(d) for d in arr.shape)
            header = f"{name} {arr.ndim}" + (f" {dims}" if arr.ndim else "") + "\n"
            fh.write(header.encode("utf-8"))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _CKPT_MAGIC:
            raise NumericsError(f"bad checkpoint magic: {magic!r}")
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.decode("utf-8").split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2 : 2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise NumericsError(f"truncated checkpoint payload for {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return arrays
