import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgdefect.autodiff import P, Tape, Tensor, backward, precision
from kgdefect.data import Dataset, Sample
from kgdefect.explain import ExplainerSpec
from kgdefect.models import ArchConfig, defectnet_forward, init_model
from kgdefect.priors import extract_priors
from kgdefect.training import (
    TrainConfig,
    augment_flip,
    bce,
    cls_loss,
    lambda_at,
    seg_loss,
    sgd_momentum_step,
    total_loss,
    train_stage1,
    train_stage2,
)

ARCH = ArchConfig(in_h=16, in_w=16, widths=(4, 8), seg_width=4, hidden=8)


def separable_set(n=16, size=16, seed=0):
    """Plain noisy surfaces vs the same with a bright square."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        img = 0.4 + 0.02 * rng.standard_normal((size, size))
        label = i % 2
        mask = np.zeros((size, size), np.uint8)
        if label:
            r, c = rng.integers(2, size - 6, 2)
            img[r : r + 4, c : c + 4] += 0.4
            mask[r : r + 4, c : c + 4] = 1
        samples.append(Sample(f"s{i:02d}", np.clip(img, 0, 1), label, mask if label else None))
    return Dataset(samples)


# -- schedule and losses --------------------------------------------------------------


@pytest.mark.parametrize("k,expected", [(0, 1.0), (50, 0.0), (25, 0.5)])
def test_lambda_examples(k, expected):
    assert lambda_at(k, 50) == expected


def test_lambda_domain():
    with pytest.raises(ValueError):
        lambda_at(6, 5)
    with pytest.raises(ValueError):
        lambda_at(0, 0)


@pytest.mark.parametrize(
    "pred,target,expected",
    [([1.0], [1], 0.0), ([0.5, 0.5], [1, 0], math.log(2)), ([0.25], [1], math.log(4))],
)
def test_bce_examples(pred, target, expected):
    assert bce(pred, target) == pytest.approx(expected, abs=2e-7)


def test_bce_length_mismatch():
    with pytest.raises(ValueError):
        bce([0.5, 0.5], [1])


def test_seg_loss_confident_and_uninformed():
    mask = (np.random.default_rng(0).random((1, 1, 4, 4)) > 0.5).astype(float)
    with precision("float64"):
        confident = seg_loss(Tensor(np.where(mask > 0, 30.0, -30.0)), mask).item()
        flat = seg_loss(Tensor(np.zeros((1, 1, 4, 4))), mask).item()
    assert confident < 1e-6
    assert flat == pytest.approx(math.log(2), abs=1e-12)


def test_seg_loss_is_flattened_bce():
    rng = np.random.default_rng(1)
    logits, mask = rng.normal(size=(1, 1, 4, 4)), (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    with precision("float64"):
        got = seg_loss(Tensor(logits), mask).item()
    assert got == pytest.approx(bce(1 / (1 + np.exp(-logits)), mask), abs=1e-12)


def test_seg_loss_downsamples_mask_nearest():
    mask = np.zeros((1, 1, 8, 8))
    mask[..., :4, :] = 1
    with precision("float64"):
        loss = seg_loss(Tensor(np.where(np.arange(4)[:, None] < 2, 30.0, -30.0) * np.ones((1, 1, 4, 4))), mask)
    assert loss.item() < 1e-6


def test_total_loss_examples():
    assert total_loss(2.0, 4.0, 1.0) == 2.0
    assert total_loss(2.0, 4.0, 0.0) == 4.0
    assert total_loss(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.5)


def test_lambda_scales_gradients():
    with precision("float64"):
        w = Tensor(np.array([1.5, -2.0]))
        tape = Tape()
        with tape:
            ls, lc = P.sum(P.mul(w, w)), P.sum(w)
            out = total_loss(ls, lc, 0.25)
        g = backward(tape, out, wrt=[w])[w]
    np.testing.assert_allclose(g, 0.25 * 2 * np.array([1.5, -2.0]) + 0.75, atol=1e-12)


def test_halving_lambda_halves_seg_gradients():
    rng = np.random.default_rng(0)
    x, prior = rng.random((2, 1, 16, 16)), rng.random((2, 1, 16, 16))
    mask = (rng.random((2, 1, 16, 16)) > 0.7).astype(float)
    grads = {}
    with precision("float64"):
        model = init_model(ARCH, 0, "guided", dtype=np.float64)
        for lam in (0.8, 0.4):
            tape = Tape()
            logits, seg, trace = defectnet_forward(model, x, prior, tape=tape)
            with tape:
                loss = total_loss(seg_loss(seg, mask), cls_loss(logits, [0, 1]), lam)
            g = backward(tape, loss, wrt=trace.params.values())
            grads[lam] = {n: g[trace.params[n]] for n in model.seg_names()}
    for name in grads[0.8]:
        np.testing.assert_allclose(grads[0.4][name], 0.5 * grads[0.8][name], rtol=1e-12, atol=1e-15)


# -- optimiser and augmentation ----------------------------------------------------------


def test_plain_sgd_without_momentum():
    p, g = {"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}
    new, _ = sgd_momentum_step(p, g, {}, 0.1, 0.0)
    np.testing.assert_allclose(new["w"], [0.95, 2.1])


def test_zero_gradient_zero_velocity_is_a_fixed_point():
    p = {"w": np.array([1.0, 2.0])}
    new, state = sgd_momentum_step(p, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 0.1, 0.9)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_heavy_ball_accumulates():
    p, g = {"w": np.array([0.0])}, {"w": np.array([1.0])}
    p, s = sgd_momentum_step(p, g, {}, 1.0, 0.5)
    p, s = sgd_momentum_step(p, g, s, 1.0, 0.5)
    np.testing.assert_allclose(s["w"], [1.5])
    np.testing.assert_allclose(p["w"], [-2.5])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_flip_applies_same_transform_to_all_arrays(seed):
    x = np.arange(12.0).reshape(3, 4)
    a, b, none = augment_flip((x, x.copy(), None), np.random.default_rng(seed))
    np.testing.assert_array_equal(a, b)
    assert none is None
    assert a.tolist() in (x.tolist(), x[::-1].tolist(), x[:, ::-1].tolist(), x[::-1, ::-1].tolist())


def test_flip_is_an_involution_and_deterministic():
    x = np.random.default_rng(0).random((5, 5))
    for seed in range(8):
        once = augment_flip((x,), np.random.default_rng(seed))[0]
        twice = augment_flip((once,), np.random.default_rng(seed))[0]
        np.testing.assert_array_equal(twice, x)
        np.testing.assert_array_equal(once, augment_flip((x,), np.random.default_rng(seed))[0])


def test_config_validation():
    for bad in ({"lr": 0.0}, {"momentum": 1.0}, {"epochs": 0}, {"stage": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- the two stages --------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1(tmp_path_factory):
    cfg = TrainConfig(lr=5e-3, epochs=30, seed=0, arch=ARCH)
    out = tmp_path_factory.mktemp("s1")
    return cfg, train_stage1(cfg, separable_set(), out), out


def test_separable_fixture_reaches_full_accuracy(stage1):
    _, res, _ = stage1
    assert all(math.isfinite(r.loss) for r in res.reports)
    assert res.reports[-1].train_accuracy == 1.0
    assert [r.epoch for r in res.reports] == list(range(30))


def test_stage1_is_deterministic(stage1, tmp_path):
    cfg, res, out = stage1
    train_stage1(cfg, separable_set(), tmp_path)
    assert (tmp_path / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()
    assert (tmp_path / "epochs.jsonl").read_bytes() == (out / "epochs.jsonl").read_bytes()


@pytest.fixture(scope="module")
def stage2(stage1):
    _, res, _ = stage1
    ds = separable_set()
    store = extract_priors(res.model, ds, ExplainerSpec("grad_cam"))
    cfg = TrainConfig(lr=5e-3, epochs=5, seed=0, stage="guided", precision="float64", arch=ARCH)
    return train_stage2(cfg, ds, store)


def test_lambda_sequence_and_loss_identity(stage2):
    lams = [r.lam for r in stage2.reports]
    assert lams == [1 - k / 5 for k in range(6)]
    assert all(a > b for a, b in zip(lams, lams[1:]))
    for b in stage2.steps:
        assert abs(b.l_total - (b.lam * b.l_seg + (1 - b.lam) * b.l_cls)) < 1e-9
    last = [b for b in stage2.steps if b.lam == 0.0]
    assert last and all(abs(b.l_total - b.l_cls) < 1e-9 for b in last)


def test_isolation_checked_every_epoch(stage2):
    assert all(r.seg_grad_from_cls == 0.0 for r in stage2.reports)


def test_stage2_needs_every_prior(stage1):
    _, res, _ = stage1
    ds = separable_set()
    store = extract_priors(res.model, Dataset(ds.samples[:-1]), ExplainerSpec())
    cfg = TrainConfig(epochs=1, stage="guided", arch=ARCH)
    with pytest.raises(Exception, match="no prior"):
        train_stage2(cfg, ds, store)
