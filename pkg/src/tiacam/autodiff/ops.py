"""Differentiable primitives.

Every function takes tensors (or array-likes, promoted to constants) and
returns a Tensor whose backward rule is registered via `make_result`.
Image tensors use channels-last layout ``(N, H, W, C)``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .tensor import Tensor, as_tensor, check_finite_leaf, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = ta if ta is not None else tb
    dtype = ref.dtype if ref is not None else None
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=dtype))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=dtype))
    return ta, tb


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("add", a, b)
    check_finite_leaf(a, "add"), check_finite_leaf(b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("sub", a, b)
    check_finite_leaf(a, "sub"), check_finite_leaf(b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("mul", a, b)
    check_finite_leaf(a, "mul"), check_finite_leaf(b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("div", a, b)
    check_finite_leaf(a, "div"), check_finite_leaf(b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a, exponent) -> Tensor:
    """Elementwise power.

    A scalar exponent gives the usual ``a**p``. A tensor exponent requires
    ``a >= 0`` and differentiates through both base and exponent; at ``a == 0``
    the output and both partials are defined as 0.
    """
    a = as_tensor(a)
    if not isinstance(exponent, Tensor):
        p = float(exponent)
        out = a.data**p

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return make_result(out, (a,), bw, "pow")

    e = exponent
    _broadcast_shape("pow", a, e)
    if np.any(a.data < 0):
        raise ValueError("pow: tensor exponent requires a non-negative base")
    pos = a.data > 0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(pos, safe**e.data, 0.0)
    out = np.broadcast_to(out, np.broadcast_shapes(a.shape, e.shape)).copy()

    def bw(g):
        ga = ge = None
        if a.requires_grad:
            ga = _unbroadcast(np.where(pos, g * e.data * safe ** (e.data - 1), 0.0), a.shape)
        if e.requires_grad:
            ge = _unbroadcast(np.where(pos, g * out * np.log(safe), 0.0), e.shape)
        return ga, ge

    return make_result(out, (a, e), bw, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return make_result(out, (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return make_result(out, (a,), bw, "gelu")


def clip(a: Tensor, lo: Optional[float], hi: Optional[float]) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return make_result(out, (a,), lambda g: (g * inside,), "clip")


def stop_grad(a: Tensor) -> Tensor:
    """Identity in the forward pass; backward contributes exactly zero."""
    a = as_tensor(a)
    return make_result(a.data, (a,), lambda g: (None,), "stop_grad")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _lift(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(np.where(cond, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return make_result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_result(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} mismatch off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    check_finite_leaf(a, "matmul"), check_finite_leaf(b, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * weight.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxh = g * weight.data
            gx = inv * (
                gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            )
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gw, gb

    return make_result(out, (x, weight, bias), bw, "layer_norm")


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5):
    """Batch statistics normalisation over axis 0 of an ``(N, F)`` input.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    (biased variance) for the caller's running-average bookkeeping.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm: expected (N, F) input, got {x.shape}")
    if weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: affine shapes {weight.shape}/{bias.shape} vs input {x.shape}")
    if x.shape[0] < 2:
        raise ShapeError("batch_norm: batch statistics need at least 2 rows")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxh = g * weight.data
            gx = inv * (gxh - gxh.mean(axis=0) - xhat * (gxh * xhat).mean(axis=0))
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=0)
        if bias.requires_grad:
            gb = g.sum(axis=0)
        return gx, gw, gb

    return make_result(out, (x, weight, bias), bw, "batch_norm"), mu, var


# ---------------------------------------------------------------------------
# image primitives


def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation of ``(N, H, W, Cin)`` with ``(kh, kw, Cin, Cout)``.

    ``padding="same"`` zero-pads to keep the spatial size and needs odd kernels;
    ``"valid"`` keeps only fully covered positions.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw = w.shape[:2]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs odd kernel size, got {w.shape[:2]}")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    elif padding == "valid":
        ph = pw = 0
        xp = x.data
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    n, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than input {x.shape[1:3]}")
    check_finite_leaf(x, "conv2d"), check_finite_leaf(w, "conv2d")
    out = np.zeros((n, ho, wo, w.shape[3]), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + ho, j : j + wo, :] @ w.data[i, j]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + ho, j : j + wo, :] += g @ w.data[i, j].T
            gx = gxp[:, ph : ph + x.shape[1], pw : pw + x.shape[2], :]
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = np.einsum("nhwc,nhwd->cd", xp[:, i : i + ho, j : j + wo, :], g)
        return gx, gw

    return make_result(out, (x, w), bw, "conv2d")


def bilinear_grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample ``x`` (N, H, W, C) at pixel coordinates ``grid`` (..., Ho, Wo, 2).

    ``grid[..., 0]`` is the column (u) and ``grid[..., 1]`` the row (v).
    Positions outside the image read as zero. A 3-D grid is shared by the batch.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_grid_sample: expected (N, H, W, C) image, got {x.shape}")
    shared = grid.ndim == 3
    if grid.shape[-1] != 2 or grid.ndim not in (3, 4) or (not shared and grid.shape[0] != x.shape[0]):
        raise ShapeError(f"bilinear_grid_sample: grid {grid.shape} incompatible with image {x.shape}")
    check_finite_leaf(grid, "bilinear_grid_sample")
    n, h, w, c = x.shape
    gd = grid.data if not shared else np.broadcast_to(grid.data, (n,) + grid.shape)
    u, v = gd[..., 0], gd[..., 1]
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu, fv = u - u0, v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    bidx = np.arange(n).reshape((n,) + (1,) * (u.ndim - 1))

    corners = []
    for dv, du in ((0, 0), (0, 1), (1, 0), (1, 1)):
        uu, vv = u0 + du, v0 + dv
        valid = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        uc, vc = np.clip(uu, 0, w - 1), np.clip(vv, 0, h - 1)
        vals = x.data[bidx, vc, uc] * valid[..., None]
        wu = fu if du else 1.0 - fu
        wv = fv if dv else 1.0 - fv
        corners.append((uc, vc, valid, vals, wu, wv, du, dv))

    out = np.zeros(u.shape + (c,), dtype=x.data.dtype)
    for uc, vc, valid, vals, wu, wv, _, _ in corners:
        out += (wu * wv)[..., None] * vals

    def bw(g):
        gx = gg = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for uc, vc, valid, _, wu, wv, _, _ in corners:
                contrib = g * ((wu * wv) * valid)[..., None]
                np.add.at(gx, (np.broadcast_to(bidx, uc.shape), vc, uc), contrib)
        if grid.requires_grad:
            gu = np.zeros(u.shape, dtype=x.data.dtype)
            gv = np.zeros(u.shape, dtype=x.data.dtype)
            for _, _, _, vals, wu, wv, du, dv in corners:
                s = (g * vals).sum(axis=-1)
                gu += s * wv * (1.0 if du else -1.0)
                gv += s * wu * (1.0 if dv else -1.0)
            gg = np.stack([gu, gv], axis=-1)
            if shared:
                gg = gg.sum(axis=0)
        return gx, gg

    return make_result(out, (x, grid), bw, "bilinear_grid_sample")


BLOCK = 8


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis, rows indexed by frequency."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


_DCT = dct_matrix()


def _blockwise(arr: np.ndarray, basis: np.ndarray) -> np.ndarray:
    *lead, h, w, c = arr.shape
    b = basis.shape[0]
    blocks = arr.reshape(*lead, h // b, b, w // b, b, c)
    out = np.einsum("pi,...aibjc,qj->...apbqc", basis, blocks, basis, optimize=True)
    return out.reshape(arr.shape)


def _check_blocks(op: str, x: Tensor) -> None:
    if x.ndim < 3 or x.shape[-3] % BLOCK or x.shape[-2] % BLOCK:
        raise ShapeError(f"{op}: spatial size of {x.shape} (…, H, W, C) must be a multiple of {BLOCK}")


def dct2d(x: Tensor) -> Tensor:
    """Orthonormal type-II DCT on every 8x8 block of every channel, laid out in place."""
    x = as_tensor(x)
    _check_blocks("dct2d", x)
    return make_result(_blockwise(x.data, _DCT), (x,), lambda g: (_blockwise(g, _DCT.T),), "dct2d")


def idct2d(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_blocks("idct2d", x)
    return make_result(_blockwise(x.data, _DCT.T), (x,), lambda g: (_blockwise(g, _DCT),), "idct2d")


def dct2d_np(arr: np.ndarray) -> np.ndarray:
    return _blockwise(np.asarray(arr, dtype=np.float64), _DCT)


def idct2d_np(arr: np.ndarray) -> np.ndarray:
    return _blockwise(np.asarray(arr, dtype=np.float64), _DCT.T)


# ---------------------------------------------------------------------------
# composite helpers (built from the primitives above)


def dot_last(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return sum(mul(a, b), axis=-1)


def cosine(a: Tensor, b: Tensor, eps: float = 0.0) -> Tensor:
    """Cosine similarity along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    na = sum(mul(a, a), axis=-1)
    nb = sum(mul(b, b), axis=-1)
    if np.any(na.data <= 0) or np.any(nb.data <= 0):
        raise ValueError("cosine: undefined cosine for a zero vector")
    return div(dot_last(a, b), sqrt(mul(na, nb) + eps))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    n = sqrt(sum(mul(a, a), axis=axis, keepdims=True) + eps)
    return div(a, n)


def is_finite(t: Tensor) -> bool:
    t = as_tensor(t)
    return bool(np.all(np.isfinite(t.data)))


__all__ = [
    "NonFiniteError",
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sin", "cos", "sqrt", "tanh",
    "sigmoid", "softplus", "relu", "gelu", "clip", "stop_grad", "where", "sum", "mean",
    "reshape", "transpose", "swapaxes", "broadcast_to", "getitem", "concat", "stack",
    "matmul", "softmax", "layer_norm", "batch_norm", "conv2d", "bilinear_grid_sample",
    "dct2d", "idct2d", "dct_matrix", "cosine", "l2_normalize", "dot_last",
]
