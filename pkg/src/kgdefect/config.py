"""Run configuration: flat dotted JSON keys merged with command-line overrides.

Example file::

    {"train.lr": 0.005, "train.epochs": 10, "data.size": 64, "model.widths": [16, 32, 64, 64]}

Unknown keys are rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .models import ArchConfig
from .training import TrainConfig

RESOLVED = "resolved-config.json"


class RunConfigError(ValueError):
    pass


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"arch", "stage"}
_MODEL_KEYS = {f.name for f in fields(ArchConfig)} - {"in_h", "in_w", "num_classes"}


def _coerce(key: str, value, template):
    """Cast a JSON or string value to the type of ``template``."""
    if isinstance(template, bool):
        if isinstance(value, str):
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise RunConfigError(f"{key}: expected a boolean, got {value!r}")
            return low in ("true", "1")
        return bool(value)
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = json.loads(value) if value.startswith("[") else value.split(",")
        return tuple(int(v) for v in value)
    if isinstance(template, int):
        if isinstance(value, float) and not value.is_integer():
            raise RunConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(template, float):
        return float(value)
    return str(value)


def _parse_size(value) -> tuple[int, int]:
    if isinstance(value, str):
        value = [int(v) for v in value.lower().replace("x", ",").split(",")]
    if isinstance(value, (int, float)):
        return int(value), int(value)
    value = [int(v) for v in value]
    if len(value) == 1:
        value = value * 2
    if len(value) != 2:
        raise ValueError("expected N, HxW or [H, W]")
    return value[0], value[1]


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, resolved from file and flags."""

    train: TrainConfig = field(default_factory=TrainConfig)
    run_dir: Path | None = None

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def input_size(self) -> tuple[int, int]:
        return self.train.input_size

    @classmethod
    def from_flat(cls, flat: dict, stage: str = "baseline") -> "RunConfig":
        train_kw, model_kw = {}, {}
        arch_defaults, train_defaults = ArchConfig(), TrainConfig()
        size = None
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section == "train" and name in _TRAIN_KEYS:
                train_kw[name] = _coerce(key, value, getattr(train_defaults, name))
            elif section == "model" and name in _MODEL_KEYS:
                model_kw[name] = _coerce(key, value, getattr(arch_defaults, name))
            elif key == "data.size":
                try:
                    size = _parse_size(value)
                except (TypeError, ValueError) as exc:
                    raise RunConfigError(f"data.size: cannot parse {value!r}") from exc
            else:
                raise RunConfigError(f"unknown config key {key!r}")
        if size is not None:
            model_kw["in_h"], model_kw["in_w"] = size
        try:
            arch = ArchConfig(**model_kw)
            train = TrainConfig(stage=stage, arch=arch, **train_kw)
        except ValueError as exc:
            raise RunConfigError(str(exc)) from exc
        return cls(train)

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None, stage: str = "baseline") -> "RunConfig":
        """Read a flat JSON file (optional) and apply ``key=value`` overrides on top."""
        flat: dict = {}
        if path is not None:
            try:
                flat = json.loads(Path(path).read_text())
            except OSError as exc:
                raise RunConfigError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise RunConfigError(f"config {path} is not valid JSON: {exc}") from exc
            if not isinstance(flat, dict):
                raise RunConfigError(f"config {path} must hold a JSON object")
        for item in overrides or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise RunConfigError(f"override {item!r} is not of the form key=value")
            flat[key.strip()] = value.strip()
        return cls.from_flat(flat, stage)

    def to_flat(self) -> dict:
        t, a = self.train, self.train.arch
        flat = {f"train.{k}": getattr(t, k) for k in sorted(_TRAIN_KEYS)}
        flat.update({f"model.{k}": getattr(a, k) for k in sorted(_MODEL_KEYS)})
        flat["model.widths"] = list(a.widths)
        flat["data.size"] = [a.in_h, a.in_w]
        return flat

    def with_run_dir(self, run_dir) -> "RunConfig":
        return replace(self, run_dir=Path(run_dir))

    def write_resolved(self, run_dir=None, extra: dict | None = None) -> Path:
        """Serialise the resolved view into the run directory before any work starts."""
        out = Path(run_dir or self.run_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"stage": self.train.stage, "config": self.to_flat(), **(extra or {})}
        path = out / RESOLVED
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path
