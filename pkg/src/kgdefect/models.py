"""Backbone classifier (stage 1) and the prior-guided defect network (stage 2).

Backbone: ``len(widths)`` stages of conv3x3 -> leaky ReLU -> maxpool 2x2. Its
last stage output is the feature map that the guided network concatenates
with the resized saliency prior before handing it to the segmentation head.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import P, Tape, Tensor, default_dtype, stop_gradient

MODES = ("baseline", "guided")
INPUT_NORMS = ("none", "median")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    in_h: int = 64
    in_w: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 64)
    in_channels: int = 1
    slope: float = 0.01
    seg_width: int = 32
    seg_depth: int = 2
    hidden: int = 32
    num_classes: int = 2
    # "median" subtracts each image's median level before the first conv
    input_norm: str = "median"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        dims = (self.in_h, self.in_w, self.in_channels, self.seg_width, self.hidden, *self.widths)
        if not self.widths or any(d <= 0 for d in dims) or self.seg_depth < 0:
            raise ConfigError(f"all dimensions must be positive: {self}")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        if self.num_classes != 2:
            raise ConfigError("only the binary (defect / normal) task is supported")
        fh, fw = self.feature_size
        if fh < 1 or fw < 1:
            raise ConfigError(
                f"{len(self.widths)} pooling stages collapse a {self.in_h}x{self.in_w} input to {fh}x{fw}"
            )

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.in_h, self.in_w
        for _ in self.widths:
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        return h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


def parameter_shapes(config: ArchConfig, mode: str) -> dict[str, tuple[int, ...]]:
    """Ordered registry of parameter names and shapes. Names are the checkpoint contract."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    shapes: dict[str, tuple[int, ...]] = {}
    c = config.in_channels
    for i, w in enumerate(config.widths):
        shapes[f"backbone.conv{i}.weight"] = (w, c, 3, 3)
        shapes[f"backbone.conv{i}.bias"] = (w,)
        c = w
    if mode == "guided":
        sc = c + 1
        for j in range(config.seg_depth):
            shapes[f"seg.conv{j}.weight"] = (config.seg_width, sc, 3, 3)
            shapes[f"seg.conv{j}.bias"] = (config.seg_width,)
            sc = config.seg_width
        shapes["seg.out.weight"] = (1, sc, 1, 1)
        shapes["seg.out.bias"] = (1,)
    shapes["head.feat.weight"] = (config.hidden, c)
    shapes["head.feat.bias"] = (config.hidden,)
    head_in = config.hidden + (2 if mode == "guided" else 0)
    shapes["head.out.weight"] = (1, head_in)
    shapes["head.out.bias"] = (1,)
    return shapes


@dataclass
class DefectNet:
    config: ArchConfig
    mode: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def names(self) -> list[str]:
        return list(self.params)

    def seg_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("seg.")]

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("backbone.")]

    def copy(self) -> "DefectNet":
        return DefectNet(self.config, self.mode, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "DefectNet":
        return DefectNet(self.config, self.mode, {k: v.astype(dtype) for k, v in self.params.items()})


def init_model(config: ArchConfig, seed: int, mode: str = "baseline", dtype=None) -> DefectNet:
    """He fan-in normal weights, zero biases.

    Each parameter draws from its own stream keyed by (seed, name), so the
    shared backbone is identical across modes for a given seed.
    """
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    params = {}
    for name, shape in parameter_shapes(config, mode).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
        fan_in = int(np.prod(shape[1:]))
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return DefectNet(config, mode, params)


@dataclass
class ForwardTrace:
    """Everything an explainer needs from one forward pass."""

    tape: Tape
    input: Tensor
    logits: Tensor
    activations: list[Tensor]
    preacts: dict[str, Tensor]
    biases: dict[str, Tensor]
    params: dict[str, Tensor]
    slope: float
    seg_logits: Tensor | None = None
    prior: Tensor | None = None

    @property
    def probes(self) -> dict[str, int]:
        out = {f"act{i}": a.node_id for i, a in enumerate(self.activations)}
        out.update({f"bias:{k}": t.node_id for k, t in self.preacts.items()})
        return out

    def class_score(self, cls: int) -> Tensor:
        """Batch-summed score of ``cls``: the defect logit for 1, its negation for 0.

        Samples do not interact in the forward pass, so gradients of the sum are
        the per-sample gradients.
        """
        if cls not in (0, 1):
            raise ValueError(f"class index must be 0 or 1, got {cls}")
        with self.tape:
            s = P.sum(self.logits)
            return s if cls == 1 else -s


def _check_input(config: ArchConfig, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1:] != (config.in_channels, config.in_h, config.in_w):
        raise ConfigError(
            f"input shape {x.shape} does not match (N, {config.in_channels}, {config.in_h}, {config.in_w})"
        )


def normalize_input(config: ArchConfig, x: np.ndarray) -> np.ndarray:
    """Per-image median removal; a data transform, not part of the differentiated graph."""
    if config.input_norm == "none":
        return x
    return x - np.median(x, axis=(1, 2, 3), keepdims=True)


def _forward(model: DefectNet, x, prior=None, tape: Tape | None = None, isolate: bool = True) -> ForwardTrace:
    """``trace.input`` is the normalised input leaf; attributions refer to it.

    ``isolate=False`` drops the stop-gradient on the injected seg features, so
    gradients see the whole decision function (explanation passes only).
    """
    cfg = model.config
    if not isinstance(x, Tensor) or cfg.input_norm != "none":
        raw = x.data if isinstance(x, Tensor) else np.asarray(x)
        _check_input(cfg, raw)
        x = Tensor(normalize_input(cfg, raw.astype(model.dtype)), dtype=model.dtype)
    _check_input(cfg, x.data)
    tape = tape if tape is not None else Tape()
    params = {k: Tensor(v, dtype=v.dtype) for k, v in model.params.items()}
    biases = {k: t for k, t in params.items() if k.endswith(".bias")}
    preacts: dict[str, Tensor] = {}
    acts: list[Tensor] = []

    def conv(h, name, pad=1):
        z = P.conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, pad=pad)
        preacts[f"{name}.bias"] = tape.probe(z)
        return z

    def dense(h, name):
        z = P.dense(h, params[f"{name}.weight"], params[f"{name}.bias"])
        preacts[f"{name}.bias"] = tape.probe(z)
        return z

    with tape:
        tape.probe(x)
        h = x
        for i in range(cfg.n_stages):
            a = tape.probe(P.leaky_relu(conv(h, f"backbone.conv{i}"), cfg.slope))
            acts.append(a)
            h = P.maxpool2d(a, 2, 2)
        feat_map = h
        feat = P.leaky_relu(dense(P.global_avg_pool(feat_map), "head.feat"), cfg.slope)

        seg_logits = prior_t = None
        if model.mode == "guided":
            prior_t = prior if isinstance(prior, Tensor) else Tensor(prior, dtype=model.dtype)
            prior_small = P.bilinear_upsample(prior_t, feat_map.shape[2:])
            s = P.concat([feat_map, prior_small], axis=1)
            for j in range(cfg.seg_depth):
                s = P.leaky_relu(conv(s, f"seg.conv{j}"), cfg.slope)
            seg_logits = conv(s, "seg.out", pad=0)
            seg_prob = P.sigmoid(seg_logits)
            injected = P.concat([P.global_max_pool(seg_prob), P.global_avg_pool(seg_prob)], axis=1)
            if isolate:
                injected = stop_gradient(injected)
            feat = P.concat([injected, feat], axis=1)
        logits = dense(feat, "head.out")

    return ForwardTrace(
        tape=tape,
        input=x,
        logits=logits,
        activations=acts,
        preacts=preacts,
        biases=biases,
        params=params,
        slope=cfg.slope,
        seg_logits=seg_logits,
        prior=prior_t,
    )


def classifier_forward(model: DefectNet, x, tape: Tape | None = None) -> tuple[Tensor, ForwardTrace]:
    """Stage-1 network: GAP(F(x)) -> hidden dense -> defect logit."""
    if model.mode != "baseline":
        raise ConfigError("classifier_forward expects a baseline model")
    trace = _forward(model, x, tape=tape)
    return trace.logits, trace


def defectnet_forward(model: DefectNet, x, prior, tape: Tape | None = None, isolate: bool = True):
    """Stage-2 network with the saliency prior injected as an extra feature channel.

    ``prior`` is (N, 1, H, W) at input resolution. Returns
    ``(logits, seg_logits, trace)``; ``seg_logits`` is at feature-map resolution.
    """
    if model.mode != "guided":
        raise ConfigError("defectnet_forward expects a guided model")
    if prior is None:
        raise ConfigError("guided model needs a prior map")
    pshape = prior.shape
    xshape = x.shape
    if len(pshape) != 4 or pshape[0] != xshape[0] or pshape[1] != 1 or tuple(pshape[2:]) != tuple(xshape[2:]):
        raise ConfigError(f"prior shape {tuple(pshape)} does not match input {tuple(xshape)}")
    trace = _forward(model, x, prior=prior, tape=tape, isolate=isolate)
    return trace.logits, trace.seg_logits, trace


def forward(model: DefectNet, x, prior=None, tape: Tape | None = None, isolate: bool = True) -> ForwardTrace:
    """Mode-dispatching forward pass returning only the trace."""
    if model.mode == "guided":
        return defectnet_forward(model, x, prior, tape=tape, isolate=isolate)[2]
    return classifier_forward(model, x, tape=tape)[1]
