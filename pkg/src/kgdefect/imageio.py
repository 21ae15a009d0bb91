"""8-bit grayscale image codec (binary PGM, optional PNG), resizing, heatmap panels."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .autodiff import bilinear_matrix


class FormatError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def decode_pgm(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if buf[:2] != b"P5":
        raise FormatError(f"{name}: not a binary PGM (magic {buf[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{name}: malformed header field {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{name}: maxval {maxval} unsupported, only 8-bit (255)")
    if w <= 0 or h <= 0:
        raise FormatError(f"{name}: bad dimensions {w}x{h}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after header")
    pos += 1
    payload = buf[pos : pos + w * h]
    if len(payload) < w * h:
        raise FormatError(f"{name}: truncated payload, expected {w * h} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def encode_pgm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"PGM encoder needs a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def decode_image(path) -> np.ndarray:
    """Read an 8-bit grayscale image as uint8 (h, w). PNG needs Pillow; colour collapses to luma."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise FormatError("PNG support needs Pillow") from exc
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_pgm(buf, str(path))


def encode_image(arr: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)
        return
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_pgm(arr))
    os.replace(tmp, path)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> 8-bit levels with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def to_float(levels: np.ndarray) -> np.ndarray:
    return np.asarray(levels, dtype=np.float64) / 255.0


def resize_bilinear_image(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (same matrices as the tensor primitive)."""
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError(f"target size must be at least 1x1, got {size}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape == (h, w):
        return arr.copy()
    return bilinear_matrix(arr.shape[0], h) @ arr @ bilinear_matrix(arr.shape[1], w).T


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize that keeps label maps binary."""
    h, w = mask.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return mask[np.ix_(rows, cols)]


def render_heatmap_overlay(image: np.ndarray, saliency, path) -> np.ndarray:
    """Write ``input | saliency | Otsu mask`` side by side as one PGM; returns the panel."""
    from .priors import make_pseudo_label

    values = getattr(saliency, "values", saliency)
    image = np.asarray(image)
    if image.shape != values.shape:
        raise ValueError(f"image {image.shape} and saliency {values.shape} differ in shape")
    img8 = image if image.dtype == np.uint8 else to_uint8(image)
    mask = make_pseudo_label(values)
    panel = np.concatenate([img8, to_uint8(values), mask.astype(np.uint8) * 255], axis=1)
    encode_image(panel, path)
    return panel
