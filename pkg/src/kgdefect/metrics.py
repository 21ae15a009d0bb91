"""Average precision, accuracy and saliency-localisation IoU."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .explain import ExplainerSpec, explain_maps
from .models import DefectNet, forward
from .priors import make_pseudo_label, map_batches, prior_maps


def average_precision(scores, labels) -> float:
    """Sum over positives of precision at their rank, divided by the positive count.

    Ranking is by descending score; ties keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].sum() / n_pos)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    return float(np.mean((scores >= threshold) == labels))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class Metrics:
    ap: float
    accuracy: float
    iou: float | None
    n: int
    n_pos: int

    def to_dict(self) -> dict:
        return asdict(self)


def predict_scores(
    model: DefectNet, images: np.ndarray, priors: np.ndarray | None = None, batch_size: int = 32, workers: int = 1
):
    """Defect probabilities for (N, H, W) images."""

    def run(a, b):
        x = images[a:b][:, None].astype(model.dtype)
        p = None if priors is None else priors[a:b][:, None].astype(model.dtype)
        return forward(model, x, p).logits.data.reshape(-1)

    out = map_batches(run, len(images), batch_size, workers)
    return expit(np.concatenate(out).astype(np.float64))


def saliency_ious(
    model: DefectNet,
    dataset,
    spec: ExplainerSpec,
    priors: np.ndarray | None = None,
    batch_size: int = 16,
    workers: int = 1,
) -> np.ndarray:
    """Per-sample IoU of Otsu-binarised saliency against ground truth, defect samples with masks only."""
    idx = [i for i, s in enumerate(dataset) if s.label == 1 and s.gt_mask is not None]
    images = np.stack([dataset[i].image for i in idx]) if idx else np.zeros((0, 1, 1))
    pri = None if priors is None else priors[idx]

    def run(a, b):
        x = images[a:b][:, None].astype(model.dtype)
        p = None if pri is None else pri[a:b][:, None].astype(model.dtype)
        maps = explain_maps(forward(model, x, p, isolate=False), spec, 1)
        return [iou(make_pseudo_label(m), dataset[idx[a + j]].gt_mask) for j, m in enumerate(maps)]

    return np.array([v for chunk in map_batches(run, len(idx), batch_size, workers) for v in chunk])


def saliency_iou(model: DefectNet, dataset, spec: ExplainerSpec, priors=None, batch_size: int = 16, workers: int = 1):
    """Mean of :func:`saliency_ious`; ``None`` when no defect sample has a mask."""
    vals = saliency_ious(model, dataset, spec, priors, batch_size, workers)
    return float(np.mean(vals)) if len(vals) else None


def evaluate(
    model: DefectNet,
    dataset,
    spec: ExplainerSpec | None = None,
    prior_model: DefectNet | None = None,
    prior_spec: ExplainerSpec | None = None,
    workers: int = 1,
) -> Metrics:
    """AP and accuracy of the defect score; saliency IoU when ``spec`` is given.

    A guided model needs ``prior_model`` (its stage-1 network) to build the
    prior channel for unseen images, explained with ``prior_spec``.
    """
    images = dataset.images()
    labels = dataset.labels
    priors = None
    if model.mode == "guided":
        if prior_model is None:
            raise ValueError("evaluating a guided model needs the stage-1 model that produces its priors")
        priors = prior_maps(prior_model, images, prior_spec or spec or ExplainerSpec(), workers=workers)
    scores = predict_scores(model, images, priors, workers=workers)
    ap = average_precision(scores, labels)
    acc = accuracy(scores, labels)
    loc = saliency_iou(model, dataset, spec, priors, workers=workers) if spec is not None else None
    return Metrics(ap, acc, loc, len(labels), int(labels.sum()))
