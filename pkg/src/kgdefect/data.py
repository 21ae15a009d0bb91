"""Synthetic surface-defect datasets and the on-disk dataset layout.

Layout::

    manifest.json
    images/<id>.pgm
    masks/<id>.pgm      defect samples only, levels {0, 255}

Normal surfaces are band-limited noise over an illumination ramp. Defects are
either a scratch (random-walk polyline, 1-3 px wide) or an anisotropic
Gaussian blob, brighter or darker than the surface by 0.2-0.5.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import FormatError, decode_image, encode_image, resize_bilinear_image, resize_nearest, to_float, to_uint8

MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (h, w) float in [0, 1]
    label: int
    gt_mask: np.ndarray | None = None  # (h, w) uint8 {0, 1}


@dataclass
class Dataset:
    samples: list[Sample]
    split: str = "train"
    root: Path | None = None
    generator: dict | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])


@dataclass(frozen=True)
class GeneratorParams:
    texture_sigma: tuple[float, float] = (1.0, 2.5)
    texture_amp: tuple[float, float] = (0.03, 0.06)
    base_level: tuple[float, float] = (0.35, 0.6)
    ramp_amp: tuple[float, float] = (0.05, 0.15)
    contrast: tuple[float, float] = (0.2, 0.5)
    scratch_width: tuple[int, int] = (1, 3)
    scratch_segments: tuple[int, int] = (3, 6)
    scratch_step: tuple[float, float] = (3.0, 6.0)  # px at 64x64, scaled with size
    blob_sigma: tuple[float, float] = (1.5, 4.0)  # px at 64x64
    scratch_prob: float = 0.5
    max_mask_fraction: float = 0.15


def _segment_distance(yy, xx, p, q):
    d = q - p
    denom = float(d @ d) or 1.0
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _background(rng: np.random.Generator, size: int, gp: GeneratorParams) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((size, size)), rng.uniform(*gp.texture_sigma), mode="wrap")
    tex *= rng.uniform(*gp.texture_amp) / (tex.std() or 1.0)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) * rng.uniform(*gp.ramp_amp)
    return rng.uniform(*gp.base_level) + ramp + tex


def _scratch(rng, size, gp):
    scale = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = [rng.uniform(0.2 * size, 0.8 * size, 2)]
    heading = rng.uniform(0, 2 * np.pi)
    for _ in range(int(rng.integers(gp.scratch_segments[0], gp.scratch_segments[1] + 1))):
        heading += rng.normal(0, 0.5)
        step = rng.uniform(*gp.scratch_step) * scale
        nxt = np.clip(pts[-1] + step * np.array([np.sin(heading), np.cos(heading)]), 0, size - 1)
        pts.append(nxt)
    width = int(rng.integers(gp.scratch_width[0], gp.scratch_width[1] + 1))
    dist = np.min([_segment_distance(yy, xx, p, q) for p, q in zip(pts[:-1], pts[1:])], axis=0)
    mask = dist <= width / 2.0
    return mask, mask.astype(np.float64)


def _blob(rng, size, gp):
    scale = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    sa, sb = rng.uniform(*gp.blob_sigma, 2) * scale
    ang = rng.uniform(0, np.pi)
    u = (yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)
    v = -(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
    g = np.exp(-0.5 * (u**2 / sa**2 + v**2 / sb**2))
    mask = g >= 0.5
    return mask, np.clip(g / 0.5, 0.0, 1.0)


def render_sample(rng: np.random.Generator, size: int, defect: bool, gp: GeneratorParams = GeneratorParams()):
    """Returns ``(image, mask, background)``; image and background are float, unclipped background."""
    bg = _background(rng, size, gp)
    if not defect:
        img = np.clip(bg, 0.0, 1.0)
        return img, None, img
    limit = gp.max_mask_fraction * size * size
    for _ in range(100):
        kind = _scratch if rng.random() < gp.scratch_prob else _blob
        mask, profile = kind(rng, size, gp)
        if 1 <= mask.sum() <= limit:
            break
    else:  # pragma: no cover
        raise DatasetError("could not draw a defect within the mask-size limits")
    sign = 1.0 if rng.random() < 0.5 else -1.0
    img = np.clip(bg + sign * rng.uniform(*gp.contrast) * profile, 0.0, 1.0)
    return img, mask.astype(np.uint8), np.clip(bg, 0.0, 1.0)


def generate_synthetic(
    out_dir,
    n_normal: int,
    n_defect: int,
    size: int = 64,
    seed: int = 0,
    split: str = "train",
    params: GeneratorParams = GeneratorParams(),
) -> Dataset:
    """Write a deterministic synthetic dataset; every byte depends only on the arguments."""
    if n_normal < 1 or n_defect < 1:
        raise DatasetError("need at least one sample of each class")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc
    records = []
    for label, count, prefix in ((0, n_normal, "normal"), (1, n_defect, "defect")):
        for i in range(count):
            rng = np.random.default_rng([int(seed), label, i])
            img, mask, _ = render_sample(rng, size, bool(label), params)
            sid = f"{prefix}_{i:04d}"
            encode_image(to_uint8(img), out / "images" / f"{sid}.pgm")
            rec = {"id": sid, "image": f"images/{sid}.pgm", "label": label, "mask": None}
            if mask is not None:
                encode_image(mask * np.uint8(255), out / "masks" / f"{sid}.pgm")
                rec["mask"] = f"masks/{sid}.pgm"
            records.append(rec)
    gen = {"seed": int(seed), "size": int(size), "n_normal": n_normal, "n_defect": n_defect, "params": asdict(params)}
    manifest = {"split": split, "generator": gen, "samples": records}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return load_dataset(out)


def load_dataset(root, size: tuple[int, int] | None = None) -> Dataset:
    """Load a dataset directory, optionally resizing images (bilinear) and masks (nearest)."""
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read {root / MANIFEST}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {root / MANIFEST}: {exc}") from exc
    samples, seen = [], set()
    for rec in manifest.get("samples", []):
        sid = rec["id"]
        if sid in seen:
            raise DatasetError(f"duplicate sample id {sid!r} in {root / MANIFEST}")
        seen.add(sid)
        label = int(rec["label"])
        if label not in (0, 1):
            raise DatasetError(f"sample {sid!r}: label must be 0 or 1")
        img_path = root / rec["image"]
        if not img_path.is_file():
            raise DatasetError(f"missing image file {img_path}")
        try:
            image = to_float(decode_image(img_path))
            mask = None
            if rec.get("mask"):
                mpath = root / rec["mask"]
                if not mpath.is_file():
                    raise DatasetError(f"missing mask file {mpath}")
                mask = (decode_image(mpath) > 127).astype(np.uint8)
        except FormatError as exc:
            raise DatasetError(str(exc)) from exc
        if mask is not None and mask.shape != image.shape:
            raise DatasetError(f"sample {sid!r}: mask {mask.shape} and image {image.shape} differ")
        if label == 0 and mask is not None and mask.any():
            raise DatasetError(f"sample {sid!r}: normal sample with a non-empty mask")
        if size is not None and image.shape != tuple(size):
            image = np.clip(resize_bilinear_image(image, size), 0.0, 1.0)
            if mask is not None:
                mask = resize_nearest(mask, size)
        samples.append(Sample(sid, image, label, mask))
    return Dataset(samples, manifest.get("split", "train"), root, manifest.get("generator"))
