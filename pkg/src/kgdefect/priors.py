"""Stage-1 knowledge generation: saliency priors and Otsu pseudo-labels.

On disk a prior store is a directory::

    index.json          entries: id, files, threshold, explainer, checkpoint digest
    <id>.sal.pgm        saliency map, 8-bit
    <id>.mask.pgm       pseudo-label, levels {0, 255}
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .explain import ExplainerSpec, explain_maps
from .imageio import FormatError, decode_image, encode_image, to_float, to_uint8
from .models import DefectNet, forward

INDEX = "index.json"


class PriorStoreError(ValueError):
    pass


# -- Otsu ------------------------------------------------------------------------


def histogram256(levels: np.ndarray) -> np.ndarray:
    levels = np.asarray(levels)
    if levels.dtype != np.uint8:
        raise ValueError("histogram256 expects uint8 levels")
    return np.bincount(levels.reshape(-1), minlength=256).astype(np.int64)


def otsu_threshold(hist) -> int:
    """Level t maximising between-class variance for {v <= t} vs {v > t}.

    Exact integer arithmetic, so ties are real ties and go to the smallest t.
    A histogram with a single occupied level returns that level.
    """
    counts = [int(c) for c in hist]
    if len(counts) != 256 or any(c < 0 for c in counts):
        raise ValueError("expected 256 non-negative counts")
    total = sum(counts)
    if total == 0:
        raise ValueError("empty histogram")
    occupied = [i for i, c in enumerate(counts) if c]
    if len(occupied) == 1:
        return occupied[0]
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(256):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # sigma_b^2 * total^2 = (s0*total - total_sum*n0)^2 / (n0*n1)
        num = (s0 * total - total_sum * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def pseudo_label(saliency) -> tuple[np.ndarray, int]:
    """Quantise to 256 levels, Otsu threshold, mask = level > t."""
    values = getattr(saliency, "values", saliency)
    levels = to_uint8(values)
    t = otsu_threshold(histogram256(levels))
    return (levels > t).astype(np.uint8), t


def make_pseudo_label(saliency) -> np.ndarray:
    return pseudo_label(saliency)[0]


# -- store -------------------------------------------------------------------------


@dataclass
class PriorEntry:
    saliency: np.ndarray  # uint8 levels
    mask: np.ndarray  # uint8 {0, 1}
    threshold: int

    @property
    def prior(self) -> np.ndarray:
        """Dequantised map used as the training-time prior channel."""
        return to_float(self.saliency)


@dataclass
class PriorStore:
    explainer: ExplainerSpec
    checkpoint_digest: str
    entries: dict[str, PriorEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, sample_id: str) -> PriorEntry:
        try:
            return self.entries[sample_id]
        except KeyError:
            raise PriorStoreError(f"no prior stored for sample {sample_id!r}") from None

    def add(self, sample_id: str, saliency_levels: np.ndarray) -> PriorEntry:
        if sample_id in self.entries:
            raise PriorStoreError(f"duplicate sample id {sample_id!r}")
        levels = np.asarray(saliency_levels, dtype=np.uint8)
        t = otsu_threshold(histogram256(levels))
        entry = PriorEntry(levels, (levels > t).astype(np.uint8), t)
        self.entries[sample_id] = entry
        return entry

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for sid, e in self.entries.items():
            sal, mask = f"{sid}.sal.pgm", f"{sid}.mask.pgm"
            encode_image(e.saliency, out / sal)
            encode_image(e.mask * np.uint8(255), out / mask)
            records.append({"id": sid, "saliency": sal, "mask": mask, "threshold": e.threshold})
        index = {
            "explainer": self.explainer.to_dict(),
            "checkpoint_digest": self.checkpoint_digest,
            "entries": records,
        }
        (out / INDEX).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, directory) -> "PriorStore":
        d = Path(directory)
        try:
            index = json.loads((d / INDEX).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PriorStoreError(f"cannot read prior index in {d}: {exc}") from exc
        store = cls(ExplainerSpec.from_dict(index["explainer"]), index["checkpoint_digest"])
        for rec in index["entries"]:
            try:
                sal = decode_image(d / rec["saliency"])
                mask = decode_image(d / rec["mask"])
            except FormatError as exc:
                raise PriorStoreError(str(exc)) from exc
            if sal.shape != mask.shape or not np.isin(mask, (0, 255)).all():
                raise PriorStoreError(f"bad mask for sample {rec['id']!r}")
            if rec["id"] in store.entries:
                raise PriorStoreError(f"duplicate sample id {rec['id']!r}")
            store.entries[rec["id"]] = PriorEntry(sal, (mask // 255).astype(np.uint8), int(rec["threshold"]))
        return store


# -- extraction --------------------------------------------------------------------


def map_batches(fn, n: int, batch_size: int, workers: int = 1) -> list:
    """``fn(start, stop)`` over consecutive batches, results in batch order.

    Each call records on its own tape (tapes are thread-local), so batches
    are independent and the ordered reduction keeps results deterministic.
    """
    spans = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if workers <= 1 or len(spans) <= 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


def saliency_levels(
    model: DefectNet,
    images: np.ndarray,
    spec: ExplainerSpec,
    priors: np.ndarray | None = None,
    batch_size: int = 16,
    target: int = 1,
    workers: int = 1,
) -> np.ndarray:
    """8-bit saliency maps, (N, H, W), for a stack of (N, H, W) images."""

    def run(a, b):
        x = images[a:b][:, None].astype(model.dtype)
        p = None if priors is None else priors[a:b][:, None].astype(model.dtype)
        return to_uint8(explain_maps(forward(model, x, p, isolate=False), spec, target))

    out = map_batches(run, len(images), batch_size, workers)
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + images.shape[1:], np.uint8)


def prior_maps(
    model: DefectNet, images: np.ndarray, spec: ExplainerSpec, batch_size: int = 16, workers: int = 1
) -> np.ndarray:
    """Dequantised prior channel for images that have no stored prior (evaluation)."""
    return to_float(saliency_levels(model, images, spec, batch_size=batch_size, workers=workers))


def extract_priors(
    model: DefectNet,
    dataset,
    spec: ExplainerSpec,
    checkpoint_digest: str = "",
    out_dir=None,
    batch_size: int = 16,
    workers: int = 1,
) -> PriorStore:
    """Explain every sample for the defect class and Otsu-binarise the result."""
    if model.mode != "baseline":
        raise PriorStoreError("priors are extracted from the stage-1 (baseline) model")
    store = PriorStore(spec, checkpoint_digest)
    ids = [s.id for s in dataset]
    if len(set(ids)) != len(ids):
        raise PriorStoreError("sample id collision in dataset")
    images = np.stack([s.image for s in dataset]) if ids else np.zeros((0, 1, 1))
    levels = saliency_levels(model, images, spec, batch_size=batch_size, workers=workers)
    for sid, lv in zip(ids, levels):
        store.add(sid, lv)
    if out_dir is not None:
        store.save(out_dir)
    return store
