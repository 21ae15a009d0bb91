"""Primitive operations: forward kernels and their vector-Jacobian products.

Image tensors are NCHW, row-major. Each primitive is a class with a
``forward(*arrays, **attrs) -> (out, ctx)`` and a
``backward(grad, ctx, needs, **attrs) -> tuple`` staticmethod; ``needs`` flags
which inputs actually want a gradient so expensive terms can be skipped.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, forward_primitive, register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------------


@register("add")
class Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast("add", a, b)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(g, ctx, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)


@register("sub")
class Sub:
    @staticmethod
    def forward(a, b):
        _check_broadcast("sub", a, b)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(g, ctx, needs):
        sa, sb = ctx
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)


@register("mul")
class Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast("mul", a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(g, ctx, needs):
        a, b = ctx
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@register("leaky_relu")
class LeakyRelu:
    @staticmethod
    def forward(x, slope=0.01):
        pos = x > 0
        return np.where(pos, x, x * x.dtype.type(slope)), pos

    @staticmethod
    def backward(g, pos, needs, slope=0.01):
        return (np.where(pos, g, g * g.dtype.type(slope)),)


@register("relu")
class Relu:
    @staticmethod
    def forward(x):
        pos = x > 0
        return np.where(pos, x, x.dtype.type(0)), pos

    @staticmethod
    def backward(g, pos, needs):
        return (np.where(pos, g, g.dtype.type(0)),)


@register("sigmoid")
class Sigmoid:
    @staticmethod
    def forward(x):
        s = expit(x)
        return s, s

    @staticmethod
    def backward(g, s, needs):
        return (g * s * (1 - s),)


@register("stop_gradient")
class StopGradient:
    @staticmethod
    def forward(x):
        return x, None

    @staticmethod
    def backward(g, ctx, needs):
        return (None,)


# -- linear algebra --------------------------------------------------------------


@register("matmul")
class Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, (a, b)

    @staticmethod
    def backward(g, ctx, needs):
        a, b = ctx
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


@register("dense")
class Dense:
    """Affine layer ``x @ w.T + b`` with ``w`` of shape (out, in)."""

    @staticmethod
    def forward(x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape} do not conform")
        return x @ w.T + b, (x, w)

    @staticmethod
    def backward(g, ctx, needs):
        x, w = ctx
        return (
            g @ w if needs[0] else None,
            g.T @ x if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


@register("conv2d")
class Conv2d:
    """Cross-correlation, zero padding, optional bias as third input."""

    @staticmethod
    def forward(x, w, b=None, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        xp = _pad(x, pad)
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = cols @ w.reshape(o, -1).T
        if b is not None:
            out += b
        out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
        return out, (cols, w, x.shape, ho, wo)

    @staticmethod
    def backward(g, ctx, needs, stride=1, pad=0):
        cols, w, xshape, ho, wo = ctx
        n, c, h, wd = xshape
        o, _, kh, kw = w.shape
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dx = dw = db = None
        if needs[1]:
            dw = (gm.T @ cols).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            db = g.sum(axis=(0, 2, 3))
        if needs[0]:
            dcols = (gm @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad : pad + h, pad : pad + wd]
        return (dx, dw, db)[: len(needs)]


# -- pooling ---------------------------------------------------------------------


@register("maxpool2d")
class MaxPool2d:
    """Max over k x k windows; ties route the gradient to the first maximum in scan order."""

    @staticmethod
    def forward(x, k=2, s=2):
        if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(f"maxpool2d: input {x.shape} too small for window {k}")
        ho = (x.shape[2] - k) // s + 1
        wo = (x.shape[3] - k) // s + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    @staticmethod
    def backward(g, ctx, needs, k=2, s=2):
        idx, shape = ctx
        ho, wo = idx.shape[2:]
        dx = np.zeros(shape, dtype=g.dtype)
        for o in range(k * k):
            di, dj = divmod(o, k)
            dx[:, :, di : di + s * ho : s, dj : dj + s * wo : s] += np.where(idx == o, g, 0)
        return (dx,)


@register("global_avg_pool")
class GlobalAvgPool:
    @staticmethod
    def forward(x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
        return x.mean(axis=(2, 3)), x.shape

    @staticmethod
    def backward(g, shape, needs):
        h, w = shape[2:]
        return (np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(),)


@register("global_max_pool")
class GlobalMaxPool:
    @staticmethod
    def forward(x):
        if x.ndim != 4:
            raise ShapeError(f"global_max_pool: expected NCHW input, got {x.shape}")
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        idx = flat.argmax(axis=-1)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], (idx, x.shape)

    @staticmethod
    def backward(g, ctx, needs):
        idx, shape = ctx
        d = np.zeros((shape[0], shape[1], shape[2] * shape[3]), dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        return (d.reshape(shape),)


# -- resampling ------------------------------------------------------------------


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    m.flags.writeable = False
    return m


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _bilinear_matrix(int(n_in), int(n_out)).astype(dtype, copy=False)


@register("bilinear_upsample")
class BilinearUpsample:
    """Bilinear resize of the last two axes to ``size``; works for down-sampling too."""

    @staticmethod
    def forward(x, size):
        if x.ndim < 2:
            raise ShapeError(f"bilinear_upsample: need at least 2-D input, got {x.shape}")
        oh, ow = size
        rh = bilinear_matrix(x.shape[-2], oh, x.dtype)
        rw = bilinear_matrix(x.shape[-1], ow, x.dtype)
        return rh @ x @ rw.T, (rh, rw)

    @staticmethod
    def backward(g, ctx, needs, size):
        rh, rw = ctx
        return (rh.T @ g @ rw,)


# -- structural ------------------------------------------------------------------


@register("concat")
class Concat:
    @staticmethod
    def forward(*xs, axis=0):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, x.shape)) if i != axis % len(ref)):
                raise ShapeError(f"concat(axis={axis}): shapes {ref} and {x.shape} do not conform")
        sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), sizes

    @staticmethod
    def backward(g, sizes, needs, axis=0):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


@register("reshape")
class Reshape:
    @staticmethod
    def forward(x, shape):
        try:
            return x.reshape(shape), x.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    @staticmethod
    def backward(g, orig, needs, shape):
        return (g.reshape(orig),)


@register("sum")
class Sum:
    @staticmethod
    def forward(x, axis=None):
        return np.asarray(x.sum(axis=axis)), x.shape

    @staticmethod
    def backward(g, shape, needs, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@register("mean")
class Mean:
    @staticmethod
    def forward(x, axis=None):
        n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        return np.asarray(x.mean(axis=axis)), (x.shape, n)

    @staticmethod
    def backward(g, ctx, needs, axis=None):
        shape, n = ctx
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / g.dtype.type(n), shape).copy(),)


# -- loss --------------------------------------------------------------------------

BCE_EPS = 1e-7


@register("bce")
class BinaryCrossEntropy:
    """Mean binary cross-entropy of probabilities against constant targets.

    Probabilities are clamped to [eps, 1 - eps] for the value. The gradient is
    the closed form evaluated at the clamped point and is passed through the
    clamp, so confidently wrong predictions still get a learning signal.
    """

    @staticmethod
    def forward(p, y):
        if p.shape != y.shape:
            raise ShapeError(f"bce: prediction {p.shape} and target {y.shape} differ")
        pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
        loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
        return np.asarray(loss, dtype=p.dtype), (pc, y)

    @staticmethod
    def backward(g, ctx, needs):
        pc, y = ctx
        dp = g * (pc - y) / (pc * (1 - pc)) / pc.size
        return (dp.astype(pc.dtype, copy=False), None)


# -- functional surface ------------------------------------------------------------


def add(a, b) -> Tensor:
    return forward_primitive("add", a, b)


def sub(a, b) -> Tensor:
    return forward_primitive("sub", a, b)


def mul(a, b) -> Tensor:
    return forward_primitive("mul", a, b)


def matmul(a, b) -> Tensor:
    return forward_primitive("matmul", a, b)


def dense(x, w, b) -> Tensor:
    return forward_primitive("dense", x, w, b)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    if b is None:
        return forward_primitive("conv2d", x, w, stride=stride, pad=pad)
    return forward_primitive("conv2d", x, w, b, stride=stride, pad=pad)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    return forward_primitive("leaky_relu", x, slope=slope)


def relu(x) -> Tensor:
    return forward_primitive("relu", x)


def sigmoid(x) -> Tensor:
    return forward_primitive("sigmoid", x)


def maxpool2d(x, k: int = 2, s: int = 2) -> Tensor:
    return forward_primitive("maxpool2d", x, k=k, s=s)


def global_avg_pool(x) -> Tensor:
    return forward_primitive("global_avg_pool", x)


def global_max_pool(x) -> Tensor:
    return forward_primitive("global_max_pool", x)


def concat(xs, axis: int = 0) -> Tensor:
    return forward_primitive("concat", *xs, axis=axis)


def bilinear_upsample(x, size: tuple[int, int]) -> Tensor:
    return forward_primitive("bilinear_upsample", x, size=(int(size[0]), int(size[1])))


def reshape(x, shape) -> Tensor:
    return forward_primitive("reshape", x, shape=tuple(shape))


def sum(x, axis=None) -> Tensor:  # noqa: A001
    return forward_primitive("sum", x, axis=axis)


def mean(x, axis=None) -> Tensor:
    return forward_primitive("mean", x, axis=axis)


def bce(p, y) -> Tensor:
    return forward_primitive("bce", p, y)
