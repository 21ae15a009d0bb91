"""Losses, the segmentation-weight schedule, SGD with momentum, and the two training stages."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NumericFault, P, Tape, Tensor, backward, precision
from .checkpoint import save_checkpoint
from .imageio import resize_nearest
from .models import ArchConfig, DefectNet, classifier_forward, defectnet_forward, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    augment: bool = True
    stage: str = "baseline"
    precision: str = "float32"
    warm_start: bool = False
    check_isolation: bool = True
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")
        if self.stage not in ("baseline", "guided"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def input_size(self) -> tuple[int, int]:
        return self.arch.in_h, self.arch.in_w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d


@dataclass
class LossBreakdown:
    l_cls: float
    l_seg: float
    lam: float
    l_total: float


@dataclass
class EpochReport:
    epoch: int
    loss: float
    train_accuracy: float
    l_cls: float | None = None
    l_seg: float | None = None
    lam: float | None = None
    seg_grad_from_cls: float | None = None
    wall_clock: float = 0.0
    metrics: dict | None = None

    def record(self) -> dict:
        """JSON record without the wall-clock, so reruns produce identical bytes."""
        d = {k: v for k, v in asdict(self).items() if v is not None and k != "wall_clock"}
        return d


@dataclass
class TrainResult:
    model: DefectNet
    reports: list[EpochReport]
    steps: list[LossBreakdown] = field(default_factory=list)
    checkpoint: Path | None = None


# -- losses and schedule -----------------------------------------------------------


def lambda_at(k: int, k_epoch: int) -> float:
    """Segmentation weight ``1 - k / k_epoch`` for epoch ``k``."""
    if k_epoch < 1:
        raise ValueError("k_epoch must be at least 1")
    if not 0 <= k <= k_epoch:
        raise ValueError(f"epoch {k} outside [0, {k_epoch}]")
    return 1.0 - k / k_epoch


def bce(pred, target) -> float:
    """Mean binary cross-entropy of probabilities (clamped to [1e-7, 1 - 1e-7])."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} targets")
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def downsample_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of (..., H, W) binary masks."""
    mask = np.asarray(mask)
    if mask.shape[-2:] == tuple(size):
        return mask
    flat = mask.reshape(-1, *mask.shape[-2:])
    out = np.stack([resize_nearest(m, size) for m in flat])
    return out.reshape(*mask.shape[:-2], *size)


def seg_loss(seg_logits: Tensor, pseudo) -> Tensor:
    """Pixelwise BCE of sigmoid(seg_logits) against the pseudo-label, averaged over all pixels."""
    pseudo = np.asarray(pseudo)
    target = downsample_mask(pseudo, seg_logits.shape[-2:]).reshape(seg_logits.shape)
    return P.bce(P.sigmoid(seg_logits), Tensor(target, dtype=seg_logits.dtype))


def cls_loss(logits: Tensor, labels) -> Tensor:
    y = np.asarray(labels).reshape(logits.shape)
    return P.bce(P.sigmoid(logits), Tensor(y, dtype=logits.dtype))


def total_loss(l_seg, l_cls, lam: float):
    """``lam * l_seg + (1 - lam) * l_cls``; works on floats and tensors."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if isinstance(l_seg, Tensor) or isinstance(l_cls, Tensor):
        return P.add(P.mul(l_seg, lam), P.mul(l_cls, 1.0 - lam))
    return lam * l_seg + (1.0 - lam) * l_cls


# -- optimisation ------------------------------------------------------------------


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float, momentum: float):
    """Heavy-ball momentum: ``v = mu * v + g``; ``theta = theta - lr * v``. Returns new dicts."""
    new_params, new_state = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        v = state.get(name)
        v = g.astype(theta.dtype, copy=True) if v is None else momentum * v + g
        v = v.astype(theta.dtype, copy=False)
        new_state[name] = v
        new_params[name] = (theta - theta.dtype.type(lr) * v).astype(theta.dtype, copy=False)
    return new_params, new_state


def augment_flip(sample: tuple, rng: np.random.Generator) -> tuple:
    """Flip every array of ``sample`` along the same axes; each axis flips with p = 0.5.

    Two draws are taken per call regardless of outcome so the stream stays aligned.
    ``None`` entries pass through.
    """
    flip_v = rng.random() < 0.5
    flip_h = rng.random() < 0.5
    out = []
    for arr in sample:
        if arr is not None:
            if flip_v:
                arr = arr[..., ::-1, :]
            if flip_h:
                arr = arr[..., ::-1]
            arr = np.ascontiguousarray(arr)
        out.append(arr)
    return tuple(out)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _param_grads(trace, gs) -> dict[str, np.ndarray]:
    return {name: gs[t] for name, t in trace.params.items()}


def _write_jsonl(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _finite(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise NumericFault(what, "non-finite loss")
    return x


# -- stage 1 -------------------------------------------------------------------------


def train_stage1(config: TrainConfig, dataset, out_dir=None, log_every: int = 0) -> TrainResult:
    """Train the plain classifier on image-level labels.

    With ``out_dir`` the best (lowest mean training loss) parameters so far are
    kept in ``out_dir/model.ckpt`` and one JSON line per epoch is appended to
    ``out_dir/epochs.jsonl``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("epochs.jsonl", "timing.jsonl"):
            (out / name).unlink(missing_ok=True)
    with precision(config.precision):
        model = init_model(config.arch, config.seed, "baseline")
        images = np.stack([s.image for s in dataset]).astype(model.dtype)
        labels = np.array([s.label for s in dataset], dtype=model.dtype)
        rng = np.random.default_rng(config.seed)
        state: dict = {}
        reports: list[EpochReport] = []
        best = math.inf
        ckpt = None
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses, correct = [], 0
            for idx in _batches(len(images), config.batch_size, rng):
                x = images[idx]
                if config.augment:
                    x = np.stack([augment_flip((im,), rng)[0] for im in x])
                y = labels[idx]
                tape = Tape()
                logits, trace = classifier_forward(model, x[:, None], tape=tape)
                with tape:
                    loss = cls_loss(logits, y)
                gs = backward(tape, loss, wrt=trace.params.values())
                model.params, state = sgd_momentum_step(
                    model.params, _param_grads(trace, gs), state, config.lr, config.momentum
                )
                losses.append(_finite(loss.item(), "bce") * len(idx))
                correct += int(((logits.data.reshape(-1) > 0) == (y > 0.5)).sum())
            mean_loss = float(np.sum(losses) / len(images))
            rep = EpochReport(epoch, mean_loss, correct / len(images), l_cls=mean_loss)
            rep.wall_clock = time.perf_counter() - t0
            reports.append(rep)
            if log_every and epoch % log_every == 0:
                log.info("stage1 epoch %d loss %.4f acc %.3f", epoch, mean_loss, rep.train_accuracy)
            if out is not None:
                _write_jsonl(out / "epochs.jsonl", rep.record())
                _write_jsonl(out / "timing.jsonl", {"epoch": epoch, "wall_clock": rep.wall_clock})
                if mean_loss < best:
                    best = mean_loss
                    ckpt = out / "model.ckpt"
                    save_checkpoint(model, ckpt, {"stage": "baseline", "epoch": epoch})
    return TrainResult(model, reports, checkpoint=ckpt)


# -- stage 2 -------------------------------------------------------------------------


def train_stage2(
    config: TrainConfig,
    dataset,
    priors,
    out_dir=None,
    init_from: DefectNet | None = None,
    extra: dict | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Retrain with the prior channel and the scheduled segmentation loss.

    Epochs run for k = 0 .. k_epoch inclusive, so the schedule starts at 1
    and the last pass is classification only. ``priors`` must cover every
    sample (``PriorStore``).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("epochs.jsonl", "timing.jsonl"):
            (out / name).unlink(missing_ok=True)
    with precision(config.precision):
        model = init_model(config.arch, config.seed, "guided")
        if config.warm_start and init_from is not None:
            for name, arr in init_from.params.items():
                if name in model.params and model.params[name].shape == arr.shape:
                    model.params[name] = arr.astype(model.dtype)
        entries = [priors[s.id] for s in dataset]
        images = np.stack([s.image for s in dataset]).astype(model.dtype)
        prior_ch = np.stack([e.prior for e in entries]).astype(model.dtype)
        masks = np.stack([e.mask for e in entries]).astype(model.dtype)
        labels = np.array([s.label for s in dataset], dtype=model.dtype)
        rng = np.random.default_rng(config.seed)
        state: dict = {}
        reports: list[EpochReport] = []
        steps: list[LossBreakdown] = []
        k_epoch = config.epochs
        ckpt = None
        for epoch in range(k_epoch + 1):
            lam = lambda_at(epoch, k_epoch)
            t0 = time.perf_counter()
            sums = np.zeros(3)
            correct = 0
            iso = None
            for idx in _batches(len(images), config.batch_size, rng):
                x, pr, m = images[idx], prior_ch[idx], masks[idx]
                if config.augment:
                    flipped = [augment_flip(t, rng) for t in zip(x, pr, m)]
                    x, pr, m = (np.stack(a) for a in zip(*flipped))
                y = labels[idx]
                tape = Tape()
                logits, seg_logits, trace = defectnet_forward(model, x[:, None], pr[:, None], tape=tape)
                with tape:
                    l_cls = cls_loss(logits, y)
                    l_seg = seg_loss(seg_logits, m[:, None])
                    l_tot = total_loss(l_seg, l_cls, lam)
                if config.check_isolation and iso is None:
                    g_cls = backward(tape, l_cls, wrt=[trace.params[n] for n in model.seg_names()])
                    iso = max(float(np.abs(g_cls[trace.params[n]]).max()) for n in model.seg_names())
                gs = backward(tape, l_tot, wrt=trace.params.values())
                model.params, state = sgd_momentum_step(
                    model.params, _param_grads(trace, gs), state, config.lr, config.momentum
                )
                b = LossBreakdown(l_cls.item(), l_seg.item(), lam, _finite(l_tot.item(), "total_loss"))
                steps.append(b)
                sums += np.array([b.l_cls, b.l_seg, b.l_total]) * len(idx)
                correct += int(((logits.data.reshape(-1) > 0) == (y > 0.5)).sum())
            mean = sums / len(images)
            rep = EpochReport(
                epoch,
                float(mean[2]),
                correct / len(images),
                l_cls=float(mean[0]),
                l_seg=float(mean[1]),
                lam=lam,
                seg_grad_from_cls=iso,
            )
            rep.wall_clock = time.perf_counter() - t0
            reports.append(rep)
            if log_every and epoch % log_every == 0:
                log.info("stage2 epoch %d lam %.3f cls %.4f seg %.4f", epoch, lam, mean[0], mean[1])
            if out is not None:
                _write_jsonl(out / "epochs.jsonl", rep.record())
                _write_jsonl(out / "timing.jsonl", {"epoch": epoch, "wall_clock": rep.wall_clock})
                ckpt = out / "model.ckpt"
                save_checkpoint(model, ckpt, {"stage": "guided", "epoch": epoch, **(extra or {})})
    return TrainResult(model, reports, steps, ckpt)
