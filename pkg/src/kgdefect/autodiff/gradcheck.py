"""Central finite differences, the independent oracle for :func:`backward`."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape, precision


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-4) -> Tensor:
    """Estimate d f / d x element by element with ``(f(x+h) - f(x-h)) / 2h``.

    ``f`` must be deterministic and return a scalar (float, 0-d array or a
    one-element :class:`Tensor`).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data, dtype=x.dtype)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base, dtype=x.dtype)))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base, dtype=x.dtype)))
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return Tensor(grad, dtype=x.dtype)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(np.asarray(v).reshape(-1)[0])


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), the metric used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


# -- random graphs -----------------------------------------------------------------

_KINKED = ("relu", "leaky_relu")
_ARGMAX = ("maxpool2d", "global_max_pool")


class RandomGraph:
    """A small random network over every primitive, for gradient checking.

    ``leaves`` maps names to arrays; ``__call__`` evaluates the scalar output
    from a dict of tensors with the same names. The structure is drawn once at
    construction so repeated evaluations follow the same plan.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.leaves: dict[str, np.ndarray] = {}
        self.plan: list[tuple] = []
        n, c = 2, int(rng.integers(1, 3))
        size = int(rng.integers(5, 9))
        self._leaf("x", (n, c, size, size))
        shape = (n, c, size, size)
        for _ in range(int(rng.integers(2, 5))):
            shape = self._image_step(shape)
        self._head(shape)

    def _leaf(self, name, shape, scale=1.0):
        self.leaves[name] = self.rng.normal(0.0, scale, size=shape)
        return name

    def _image_step(self, shape):
        n, c, h, w = shape
        choices = ["conv", "act", "upsample", "binary", "concat"]
        if min(h, w) >= 4:
            choices.append("pool")
        op = choices[int(self.rng.integers(len(choices)))]
        k = len(self.plan)
        if op == "conv":
            o = int(self.rng.integers(1, 4))
            kh = int(self.rng.integers(1, 4))
            pad = int(self.rng.integers(0, 2))
            stride = 1 if min(h, w) < 6 else int(self.rng.integers(1, 3))
            if h + 2 * pad < kh:
                pad = kh
            wname = self._leaf(f"w{k}", (o, c, kh, kh), scale=1.0 / np.sqrt(c * kh * kh))
            bname = self._leaf(f"b{k}", (o,), scale=0.5) if self.rng.random() < 0.7 else None
            self.plan.append(("conv", wname, bname, stride, pad))
            return (n, o, (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kh) // stride + 1)
        if op == "act":
            kind = ("relu", "leaky_relu", "sigmoid")[int(self.rng.integers(3))]
            self.plan.append(("act", kind, float(self.rng.uniform(0.01, 0.3))))
            return shape
        if op == "pool":
            k_, s_ = ((2, 2), (2, 1), (3, 2))[int(self.rng.integers(3))]
            self.plan.append(("pool", k_, s_))
            return (n, c, (h - k_) // s_ + 1, (w - k_) // s_ + 1)
        if op == "upsample":
            size = (int(self.rng.integers(3, 10)), int(self.rng.integers(3, 10)))
            self.plan.append(("upsample", size))
            return (n, c, *size)
        if op == "binary":
            kind = ("add", "mul", "sub")[int(self.rng.integers(3))]
            bshape = shape if self.rng.random() < 0.5 else (1, c, 1, 1)
            name = self._leaf(f"a{k}", bshape)
            self.plan.append(("binary", kind, name))
            return shape
        wname = self._leaf(f"cw{k}", (1, c, 1, 1))
        self.plan.append(("concat", wname))
        return (n, c + 1, h, w)

    def _head(self, shape):
        n, c, h, w = shape
        pool = ("gap", "gmp", "flat")[int(self.rng.integers(3))]
        feat = c if pool != "flat" else c * h * w
        hidden = int(self.rng.integers(2, 5))
        self._leaf("dw", (hidden, feat), scale=1.0 / np.sqrt(feat))
        self._leaf("db", (hidden,), scale=0.5)
        self._leaf("mm", (hidden, 1), scale=1.0 / np.sqrt(hidden))
        reduce = ("bce", "sum", "mean")[int(self.rng.integers(3))]
        self.target = (self.rng.random((n, 1)) < 0.5).astype(np.float64)
        self.plan.append(("head", pool, reduce))

    def __call__(self, t: dict[str, Tensor]) -> Tensor:
        from . import primitives as P

        x = t["x"]
        for step in self.plan:
            op = step[0]
            if op == "conv":
                _, wname, bname, stride, pad = step
                x = P.conv2d(x, t[wname], t[bname] if bname else None, stride=stride, pad=pad)
            elif op == "act":
                _, kind, slope = step
                x = P.leaky_relu(x, slope) if kind == "leaky_relu" else getattr(P, kind)(x)
            elif op == "pool":
                x = P.maxpool2d(x, step[1], step[2])
            elif op == "upsample":
                x = P.bilinear_upsample(x, step[1])
            elif op == "binary":
                x = getattr(P, step[1])(x, t[step[2]])
            elif op == "concat":
                x = P.concat([x, P.conv2d(x, t[step[1]])], axis=1)
            else:
                _, pool, reduce = step
                if pool == "gap":
                    x = P.global_avg_pool(x)
                elif pool == "gmp":
                    x = P.global_max_pool(x)
                else:
                    x = P.reshape(x, (x.shape[0], -1))
                x = P.dense(x, t["dw"], t["db"])
                x = P.matmul(x, t["mm"])
                if reduce == "bce":
                    return P.bce(P.sigmoid(x), Tensor(self.target, dtype=x.dtype))
                return getattr(P, reduce)(x)
        raise AssertionError("plan has no head")

    def kink_margin(self, tensors: dict[str, Tensor]) -> float:
        """Smallest distance of any kinked primitive from its non-smooth point."""
        with Tape() as tape:
            self(tensors)
        values = tape.replay()
        margin = np.inf
        for rec in tape.records:
            v = values[rec.inputs[0]]
            if rec.kind in _KINKED:
                margin = min(margin, float(np.abs(v).min()))
            elif rec.kind in _ARGMAX:
                if rec.kind == "maxpool2d":
                    k, s = rec.attrs["k"], rec.attrs["s"]
                    win = np.lib.stride_tricks.sliding_window_view(v, (k, k), axis=(2, 3))[:, :, ::s, ::s]
                    flat = win.reshape(*win.shape[:4], -1)
                else:
                    flat = v.reshape(v.shape[0], v.shape[1], -1)
                if flat.shape[-1] > 1:
                    top = np.sort(flat, axis=-1)
                    margin = min(margin, float((top[..., -1] - top[..., -2]).min()))
        return margin


def random_graph(seed: int, min_margin: float = 1e-3, max_tries: int = 50) -> RandomGraph:
    """Draw a :class:`RandomGraph` whose kinks are at least ``min_margin`` away."""
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        g = RandomGraph(rng)
        tensors = {k: Tensor(v, dtype=np.float64) for k, v in g.leaves.items()}
        if g.kink_margin(tensors) >= min_margin:
            return g
    raise RuntimeError(f"no kink-free graph found for seed {seed}")


def graph_gradient_error(g: RandomGraph, h: float = 1e-4) -> float:
    """Worst relative error between backward() and central differences over every leaf (64-bit)."""
    with precision("float64"):
        tensors = {k: Tensor(v, dtype=np.float64) for k, v in g.leaves.items()}
        with Tape() as tape:
            out = g(tensors)
        grads = backward(tape, out)
        worst = 0.0
        for name, leaf in tensors.items():

            def f(t, name=name):
                return g({**tensors, name: t})

            fd = finite_difference_gradient(f, leaf, h)
            worst = max(worst, relative_error(grads[leaf], fd.data))
    return worst
