"""Binary checkpoint format.

``model.ckpt`` = 8-byte magic ``DKPT0001`` | uint32 LE manifest length |
UTF-8 JSON manifest | blob of little-endian float32 parameters. The manifest
lists every parameter's name, shape, byte offset and size, and carries the
SHA-256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .models import ArchConfig, DefectNet, init_model, parameter_shapes

log = logging.getLogger(__name__)

MAGIC = b"DKPT0001"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def blob_digest(blob: bytes) -> str:
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def serialize(model: DefectNet, extra: dict | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in model.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "mode": model.mode,
        "arch": model.config.to_dict(),
        "params": table,
        "digest": blob_digest(blob),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + blob


def save_checkpoint(model: DefectNet, path, extra: dict | None = None) -> str:
    """Atomically write ``model``; returns the blob digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize(model, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return read_manifest_bytes(data)[0]["digest"]


def read_manifest_bytes(data: bytes) -> tuple[dict, bytes]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        manifest = json.loads(data[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    blob = data[12 + n :]
    digest = blob_digest(blob)
    if digest != manifest.get("digest"):
        raise CheckpointError(f"digest mismatch: manifest says {manifest.get('digest')}, blob hashes to {digest}")
    return manifest, blob


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Verified manifest and parameter arrays (float32) keyed by name."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest, blob = read_manifest_bytes(data)
    arrays, spans = {}, []
    for rec in manifest["params"]:
        shape = tuple(rec["shape"])
        start, nbytes = int(rec["offset"]), int(rec["nbytes"])
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or start < 0 or start + nbytes > len(blob):
            raise CheckpointError(f"parameter {rec['name']!r} lies outside the blob")
        spans.append((start, start + nbytes, rec["name"]))
        arrays[rec["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).copy()
    spans.sort()
    for (s0, e0, a), (s1, _, b) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"parameters {a!r} and {b!r} overlap")
    return manifest, arrays


def load_checkpoint(path, into: DefectNet | None = None, dtype=np.float32) -> DefectNet:
    """Load a checkpoint.

    Without ``into`` the stored architecture and mode are rebuilt exactly. With
    ``into`` (warm start) every parameter whose name and shape match is copied
    and the rest keep their current values, with a warning listing them.
    """
    manifest, arrays = read_checkpoint(path)
    if into is None:
        cfg = ArchConfig.from_dict(manifest["arch"])
        mode = manifest["mode"]
        expected = parameter_shapes(cfg, mode)
        unknown = set(arrays) - set(expected)
        if unknown:
            raise CheckpointError(f"unknown parameter names {sorted(unknown)}")
        missing = set(expected) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
        model = init_model(cfg, 0, mode, dtype=dtype)
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise CheckpointError(f"{name}: stored shape {arrays[name].shape}, expected {shape}")
            model.params[name] = arrays[name].astype(dtype)
        return model

    model = into.copy()
    skipped = []
    for name, arr in arrays.items():
        if name in model.params and model.params[name].shape == arr.shape:
            model.params[name] = arr.astype(model.dtype)
        else:
            skipped.append(name)
    untouched = [n for n in model.params if n not in arrays or n in skipped]
    if skipped or untouched:
        log.warning(
            "partial checkpoint load from %s: ignored %s, left at init %s", path, sorted(skipped), sorted(untouched)
        )
    return model


def checkpoint_digest(path) -> str:
    manifest, _ = read_checkpoint(path)
    return manifest["digest"]
