import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgdefect.autodiff import (
    P,
    PRIMITIVES,
    NumericFault,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
    finite_difference_gradient,
    graph_gradient_error,
    precision,
    random_graph,
    relative_error,
    stop_gradient,
)

# -- oracles -------------------------------------------------------------------------


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    """Direct nested-loop cross-correlation, NCHW."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for k in range(o):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, k, r, s] = np.sum(patch * w[k]) + (b[k] if b is not None else 0.0)
    return out


def maxpool_loops(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, oh, ow))
    for r in range(oh):
        for q in range(ow):
            out[:, :, r, q] = x[:, :, r * s : r * s + k, q * s : q * s + k].max(axis=(2, 3))
    return out


def bilinear_point(img, oh, ow):
    """Half-pixel-centre bilinear resize, one output pixel at a time."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = max((i + 0.5) * h / oh - 0.5, 0.0)
            x = max((j + 0.5) * w / ow - 0.5, 0.0)
            y0, x0 = min(int(np.floor(y)), h - 1), min(int(np.floor(x)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (
                img[y0, x0] * (1 - dy) * (1 - dx)
                + img[y0, x1] * (1 - dy) * dx
                + img[y1, x0] * dy * (1 - dx)
                + img[y1, x1] * dy * dx
            )
    return out


# -- forward ----------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[range(3), range(3)] = 1.0
    with precision("float64"):
        np.testing.assert_array_equal(P.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_constant_field():
    out = P.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    stride=st.integers(1, 2),
    pad=st.integers(0, 2),
    bias=st.booleans(),
)
def test_conv_matches_loop_oracle(seed, stride, pad, bias):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3) if bias else None
    with precision("float64"):
        out = P.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, pad), atol=1e-10)


def test_conv_example_float32_within_1e6():
    rng = np.random.default_rng(5)
    x = rng.random((1, 1, 5, 5))
    w = rng.normal(size=(2, 1, 3, 3))
    out = P.conv2d(Tensor(x, dtype=np.float32), Tensor(w, dtype=np.float32))
    assert np.max(np.abs(out.data - conv2d_loops(x, w))) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 3), s=st.integers(1, 3))
def test_maxpool_matches_loop_oracle(seed, k, s):
    x = np.random.default_rng(seed).normal(size=(1, 2, 7, 6))
    with precision("float64"):
        np.testing.assert_array_equal(P.maxpool2d(Tensor(x), k, s).data, maxpool_loops(x, k, s))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), oh=st.integers(1, 9), ow=st.integers(1, 9))
def test_bilinear_matches_point_oracle(seed, oh, ow):
    img = np.random.default_rng(seed).random((4, 5))
    with precision("float64"):
        out = P.bilinear_upsample(Tensor(img[None, None]), (oh, ow)).data[0, 0]
    np.testing.assert_allclose(out, bilinear_point(img, oh, ow), atol=1e-12)


def test_bilinear_constant_stays_constant():
    out = P.bilinear_upsample(Tensor(np.full((1, 1, 3, 3), 0.25)), (6, 6))
    np.testing.assert_allclose(out.data, 0.25, atol=1e-7)


def test_pools_and_reductions():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(P.global_avg_pool(x).data, [[1.5, 5.5]])
    np.testing.assert_array_equal(P.global_max_pool(x).data, [[3.0, 7.0]])
    assert P.sum(x).item() == 28.0
    assert P.mean(x).item() == 3.5


def test_leaky_relu_slope():
    out = P.leaky_relu(Tensor(np.array([-2.0, 3.0])), 0.1)
    np.testing.assert_allclose(out.data, [-0.2, 3.0], rtol=1e-6)


def test_float32_default_and_float64_mode():
    assert Tensor([1.0]).dtype == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


# -- backward ---------------------------------------------------------------------


def test_grad_of_sum_of_squares():
    with precision("float64"):
        x = Tensor([1.0, 2.0, 3.0])
        with Tape() as tape:
            out = P.sum(x * x)
        np.testing.assert_array_equal(backward(tape, out)[x], [2.0, 4.0, 6.0])


def test_stop_gradient_blocks_ancestors():
    with precision("float64"):
        w, x = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
        with Tape() as tape:
            out = P.sum(stop_gradient(w * x))
        np.testing.assert_array_equal(backward(tape, out)[w], [0.0, 0.0])


def test_stop_gradient_forward_identity():
    t = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(stop_gradient(t).data, t.data)


def test_stop_gradient_branch_adds_nothing():
    with precision("float64"):
        w, x = Tensor([1.5, -2.0]), Tensor([3.0, 4.0])
        with Tape() as t1:
            a = P.sum(w * x)
        with Tape() as t2:
            b = P.sum(P.add(w * x, stop_gradient(w * x)))
        np.testing.assert_array_equal(backward(t1, a)[w], backward(t2, b)[w])


def test_unreachable_node_gets_zero_gradient():
    with precision("float64"):
        x, y, z = Tensor([1.0, 2.0]), Tensor([5.0]), Tensor([[1.0, 2.0]])
        with Tape() as tape:
            dead = P.sum(y * y)
            out = P.sum(x * x)
        g = backward(tape, out, wrt=[x, y, z])
        np.testing.assert_array_equal(g[y], [0.0])
        np.testing.assert_array_equal(g[z], [[0.0, 0.0]])
        assert dead.item() == 25.0


def test_non_scalar_output_rejected():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        out = x * x
    with pytest.raises(ShapeError):
        backward(tape, out)


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        P.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_output_is_numeric_fault():
    with pytest.raises(NumericFault, match="mul"):
        P.mul(Tensor([np.finfo(np.float32).max]), Tensor([10.0]))


def test_maxpool_tie_routes_to_first_in_scan_order():
    with precision("float64"):
        x = Tensor(np.ones((1, 1, 2, 2)))
        with Tape() as tape:
            out = P.sum(P.maxpool2d(x, 2, 2))
        np.testing.assert_array_equal(backward(tape, out)[x][0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_finite_difference_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    np.testing.assert_allclose(finite_difference_gradient(P.sum, x).data, np.ones((2, 3)), atol=1e-3)
    with precision("float64"):
        fd = finite_difference_gradient(lambda t: P.sum(t * t), Tensor([3.0]), 1e-4)
    assert abs(fd.data[0] - 6.0) < 1e-6


def test_dense_sigmoid_net_matches_finite_difference():
    rng = np.random.default_rng(3)
    with precision("float64"):
        x = Tensor(rng.normal(size=(4, 5)))
        w1, b1 = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=6))
        w2, b2 = Tensor(rng.normal(size=(1, 6))), Tensor(rng.normal(size=1))

        def f(w):
            return P.sum(P.dense(P.sigmoid(P.dense(x, w, b1)), w2, b2))

        with Tape() as tape:
            out = f(w1)
        g = backward(tape, out)[w1]
        assert relative_error(g, finite_difference_gradient(f, w1).data) < 1e-3


def test_three_layer_leaky_net_every_parameter():
    rng = np.random.default_rng(11)
    with precision("float64"):
        x = Tensor(rng.normal(size=(2, 1, 6, 6)))
        params = {
            "c1": Tensor(rng.normal(size=(3, 1, 3, 3))),
            "b1": Tensor(rng.normal(size=3) * 0.1),
            "c2": Tensor(rng.normal(size=(4, 3, 3, 3))),
            "b2": Tensor(rng.normal(size=4) * 0.1),
            "w": Tensor(rng.normal(size=(1, 4))),
            "b": Tensor(rng.normal(size=1)),
        }

        def net(p):
            h = P.leaky_relu(P.conv2d(x, p["c1"], p["b1"], pad=1))
            h = P.leaky_relu(P.conv2d(h, p["c2"], p["b2"], pad=1))
            return P.sum(P.leaky_relu(P.dense(P.global_avg_pool(h), p["w"], p["b"])))

        with Tape() as tape:
            out = net(params)
        grads = backward(tape, out)
        for name, leaf in params.items():
            fd = finite_difference_gradient(lambda t, n=name: net({**params, n: t}), leaf)
            assert relative_error(grads[leaf], fd.data) < 1e-3, name


@pytest.mark.parametrize("seed", range(12))
def test_random_graph_gradients(seed):
    assert graph_gradient_error(random_graph(seed)) < 1e-3


def test_random_graphs_cover_every_primitive():
    kinds = set()
    for seed in range(60):
        g = random_graph(seed)
        with precision("float64"), Tape() as tape:
            g({k: Tensor(v) for k, v in g.leaves.items()})
        kinds |= {r.kind for r in tape.records}
    required = {
        "add",
        "mul",
        "matmul",
        "conv2d",
        "dense",
        "leaky_relu",
        "relu",
        "sigmoid",
        "maxpool2d",
        "global_avg_pool",
        "global_max_pool",
        "concat",
        "bilinear_upsample",
        "sum",
        "mean",
    }
    assert required <= kinds
    assert required <= set(PRIMITIVES)


# -- properties -------------------------------------------------------------------


def _two_losses(rng):
    x = Tensor(rng.normal(size=(2, 1, 5, 5)))
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    with Tape() as tape:
        h = P.leaky_relu(P.conv2d(x, w, pad=1))
        l1 = P.sum(h)
        l2 = P.mean(P.sigmoid(h))
    return tape, x, w, l1, l2


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity_of_backward(seed, a, b):
    with precision("float64"):
        tape, x, w, l1, l2 = _two_losses(np.random.default_rng(seed))
        g1, g2 = backward(tape, l1), backward(tape, l2)
        with tape:
            combo = P.add(P.mul(l1, a), P.mul(l2, b))
        g = backward(tape, combo)
        for leaf in (x, w):
            np.testing.assert_allclose(g[leaf], a * g1[leaf] + b * g2[leaf], atol=1e-6)


def test_determinism_bit_identical():
    def run():
        with precision("float64"):
            tape, x, w, l1, _ = _two_losses(np.random.default_rng(9))
            g = backward(tape, l1)
            return l1.data.tobytes(), g[x].tobytes(), g[w].tobytes()

    assert run() == run()


def test_probe_changes_nothing():
    rng = np.random.default_rng(2)
    with precision("float64"):
        x = Tensor(rng.normal(size=(1, 1, 5, 5)))
        w = Tensor(rng.normal(size=(2, 1, 3, 3)))

        def run(probe):
            with Tape() as tape:
                h = P.conv2d(x, w, pad=1)
                if probe:
                    tape.probe(h)
                out = P.sum(P.leaky_relu(h))
            g = backward(tape, out)
            return out.data.copy(), g[w].copy(), g.get(h)

        v0, g0, _ = run(False)
        v1, g1, gh = run(True)
    np.testing.assert_array_equal(v0, v1)
    np.testing.assert_array_equal(g0, g1)
    assert gh is not None and gh.shape == (1, 2, 5, 5)


def test_replay_is_bit_exact():
    rng = np.random.default_rng(6)
    with precision("float64"):
        x = Tensor(rng.normal(size=(2, 1, 6, 6)))
        w = Tensor(rng.normal(size=(3, 1, 3, 3)))
        with Tape() as tape:
            h = P.leaky_relu(P.conv2d(x, w, pad=1))
            u = P.bilinear_upsample(P.maxpool2d(h, 2, 2), (5, 5))
            out = P.mean(P.sigmoid(u))
        values = tape.replay()
    for t in (h, u, out):
        np.testing.assert_array_equal(values[t.node_id], t.data)


def test_tapes_are_thread_local():
    seen = []

    def worker():
        seen.append(active_tape())

    with Tape():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [None]
