"""Saliency maps from a :class:`~kgdefect.models.ForwardTrace`.

Three explainers share one gradient pass of the target-class score:

* Grad-CAM: channel weights are spatial means of the gradient.
* LayerCAM: weights are the ReLU-clamped gradient itself, per position; maps
  from several layers are normalised, upsampled and fused by elementwise max.
* FullGrad: |grad x input| plus, for every bias, |grad of its pre-activation x
  bias|, each rescaled to [0, 1] and summed at input resolution.

All maps come back min-max normalised to [0, 1] at the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import backward, bilinear_matrix

KINDS = ("grad_cam", "layer_cam", "full_grad")
ALIASES = {"gradcam": "grad_cam", "layercam": "layer_cam", "fullgrad": "full_grad"}
EPS = 1e-12


class ExplainerError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray
    explainer: str
    sample_id: str | None = None
    target: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ExplainerSpec:
    kind: str = "layer_cam"
    layers: tuple[int, ...] | None = None  # None: every conv stage
    fusion: str = "max"

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ExplainerError(f"unknown explainer {self.kind!r}; choose from {sorted(ALIASES)}")
        object.__setattr__(self, "kind", kind)
        if self.layers is not None:
            if len(self.layers) == 0:
                raise ExplainerError("layer selection must not be empty")
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if self.fusion != "max":
            raise ExplainerError(f"unsupported fusion {self.fusion!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "layers": None if self.layers is None else list(self.layers), "fusion": self.fusion}

    @classmethod
    def from_dict(cls, d: dict) -> "ExplainerSpec":
        layers = d.get("layers")
        return cls(d["kind"], None if layers is None else tuple(layers), d.get("fusion", "max"))


# -- postprocessing ----------------------------------------------------------------


def rescale(raw: np.ndarray, axes=None) -> np.ndarray:
    """Min-max rescale to [0, 1] over ``axes``; constant slices become zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=axes, keepdims=True)
    hi = raw.max(axis=axes, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (raw - lo) / safe, 0.0)


def postprocess_saliency(raw: np.ndarray, explainer: str = "raw", sample_id=None, target: int = 1) -> SaliencyMap:
    return SaliencyMap(rescale(raw), explainer, sample_id, target)


def psi(raw: np.ndarray, axes=None) -> np.ndarray:
    """FullGrad postprocessing: absolute value, then min-max rescale."""
    return rescale(np.abs(raw), axes)


def _upsample(maps: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """(N, h, w) -> (N, H, W) bilinear, same convention as the tensor primitive."""
    rh = bilinear_matrix(maps.shape[-2], size[0])
    rw = bilinear_matrix(maps.shape[-1], size[1])
    return rh @ maps @ rw.T


def _per_sample(maps: np.ndarray) -> np.ndarray:
    return rescale(maps, axes=tuple(range(1, maps.ndim)))


def _wrap(maps: np.ndarray, kind: str, cls: int, sample_ids) -> list[SaliencyMap]:
    ids = list(sample_ids) if sample_ids is not None else [None] * len(maps)
    return [SaliencyMap(m, kind, sid, cls) for m, sid in zip(maps, ids)]


def _grads(trace, cls: int):
    score = trace.class_score(cls)
    return backward(trace.tape, score, wrt=[trace.input])


def _layers(trace, layers) -> list[int]:
    n = len(trace.activations)
    sel = list(range(n)) if layers is None else list(layers)
    if not sel:
        raise ExplainerError("layer selection must not be empty")
    for i in sel:
        if not -n <= i < n:
            raise ExplainerError(f"layer {i} is not probed (trace has {n} activation probes)")
    return sel


def _input_size(trace) -> tuple[int, int]:
    return tuple(trace.input.shape[-2:])


# -- explainers --------------------------------------------------------------------


def grad_cam_maps(trace, cls: int = 1, layer: int = -1) -> np.ndarray:
    (layer,) = _layers(trace, [layer])
    grads = _grads(trace, cls)
    act = trace.activations[layer]
    a = act.data.astype(np.float64)
    g = grads[act].astype(np.float64)
    weights = g.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * a).sum(axis=1), 0.0)
    return _per_sample(_upsample(cam, _input_size(trace)))


def layer_cam_maps(trace, cls: int = 1, layers=None) -> np.ndarray:
    sel = _layers(trace, layers)
    grads = _grads(trace, cls)
    size = _input_size(trace)
    fused = None
    for i in sel:
        act = trace.activations[i]
        w = np.maximum(grads[act].astype(np.float64), 0.0)
        cam = np.maximum((w * act.data.astype(np.float64)).sum(axis=1), 0.0)
        up = _upsample(_per_sample(cam), size)
        fused = up if fused is None else np.maximum(fused, up)
    return _per_sample(fused)


def full_grad_terms(trace, cls: int = 1):
    """Raw (pre-postprocessing) FullGrad terms.

    Returns ``(input_term, bias_terms)`` where ``input_term`` is grad * x with the
    input's shape and ``bias_terms`` maps each bias name to grad(pre-activation)
    * bias broadcast over the pre-activation's shape.
    """
    grads = _grads(trace, cls)
    x = trace.input.data.astype(np.float64)
    input_term = grads[trace.input].astype(np.float64) * x
    bias_terms = {}
    for name, z in trace.preacts.items():
        if name not in trace.biases:
            raise ExplainerError(f"pre-activation probe {name!r} has no matching bias")
        b = trace.biases[name].data.astype(np.float64)
        g = grads[z].astype(np.float64)
        shape = (1, -1) + (1,) * (g.ndim - 2)
        bias_terms[name] = g * b.reshape(shape)
    return input_term, bias_terms


def full_grad_maps(trace, cls: int = 1) -> np.ndarray:
    missing = set(trace.biases) - set(trace.preacts)
    if missing:
        raise ExplainerError(f"missing bias probes: {sorted(missing)}")
    input_term, bias_terms = full_grad_terms(trace, cls)
    size = _input_size(trace)
    n = input_term.shape[0]
    total = psi(input_term, axes=tuple(range(1, input_term.ndim))).sum(axis=1)
    for term in bias_terms.values():
        axes = tuple(range(1, term.ndim))
        if term.ndim == 4:
            total = total + _upsample(psi(term, axes).sum(axis=1), size)
        else:
            # fully connected bias: spatially uniform contribution
            total = total + psi(term, axes).reshape(n, -1).sum(axis=1)[:, None, None]
    return _per_sample(total)


def completeness_residuals(trace, cls: int = 1) -> np.ndarray:
    """Per-sample |f_c - (input term + bias terms)| / max(|f_c|, eps)."""
    input_term, bias_terms = full_grad_terms(trace, cls)
    n = input_term.shape[0]
    total = input_term.reshape(n, -1).sum(axis=1)
    for term in bias_terms.values():
        total = total + term.reshape(n, -1).sum(axis=1)
    f = trace.logits.data.reshape(n, -1).sum(axis=1).astype(np.float64)
    if cls == 0:
        f = -f
    return np.abs(f - total) / np.maximum(np.abs(f), EPS)


def completeness_residual(trace, cls: int = 1) -> float:
    return float(completeness_residuals(trace, cls).max())


def grad_cam(trace, cls: int = 1, layer: int = -1, sample_ids=None) -> list[SaliencyMap]:
    return _wrap(grad_cam_maps(trace, cls, layer), "grad_cam", cls, sample_ids)


def layer_cam(trace, cls: int = 1, layers=None, sample_ids=None) -> list[SaliencyMap]:
    return _wrap(layer_cam_maps(trace, cls, layers), "layer_cam", cls, sample_ids)


def full_grad(trace, cls: int = 1, sample_ids=None) -> list[SaliencyMap]:
    return _wrap(full_grad_maps(trace, cls), "full_grad", cls, sample_ids)


def explain_maps(trace, spec: ExplainerSpec, cls: int = 1) -> np.ndarray:
    """(N, H, W) normalised maps for ``spec``."""
    if spec.kind == "grad_cam":
        layers = _layers(trace, spec.layers if spec.layers is not None else [-1])
        maps = [grad_cam_maps(trace, cls, i) for i in layers]
        return _per_sample(np.maximum.reduce(maps)) if len(maps) > 1 else maps[0]
    if spec.kind == "layer_cam":
        return layer_cam_maps(trace, cls, spec.layers)
    return full_grad_maps(trace, cls)


def explain(trace, spec: ExplainerSpec, cls: int = 1, sample_ids=None) -> list[SaliencyMap]:
    return _wrap(explain_maps(trace, spec, cls), spec.kind, cls, sample_ids)
