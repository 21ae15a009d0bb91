"""Paired-seed synthetic benchmark: baseline classifier vs the knowledge-guided model.

For each seed a fresh train/test pair is generated, stage 1 is trained, its
priors are extracted, stage 2 is trained on them, and both models are scored
on the held-out split (AP, accuracy, saliency IoU against ground truth).
"""

from __future__ import annotations

import json
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import generate_synthetic
from .explain import ExplainerSpec
from .metrics import evaluate, saliency_ious
from .models import ArchConfig
from .priors import extract_priors, prior_maps
from .training import TrainConfig, train_stage1, train_stage2


@dataclass(frozen=True)
class BenchmarkConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train: tuple[int, int] = (400, 60)  # normal, defect
    n_test: tuple[int, int] = (100, 20)
    size: int = 64
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    lr: float = 5e-3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    explainer: str = "layer_cam"
    # the two finest stages; with all four the 8x8 deepest map dominates the max fusion
    layers: tuple[int, ...] | None = (0, 1)
    workers: int = 1

    @property
    def spec(self) -> ExplainerSpec:
        return ExplainerSpec(self.explainer, layers=self.layers)

    def train_config(self, seed: int, stage: str) -> TrainConfig:
        arch = ArchConfig(in_h=self.size, in_w=self.size, widths=self.widths)
        epochs = self.epochs_stage1 if stage == "baseline" else self.epochs_stage2
        return TrainConfig(lr=self.lr, epochs=epochs, seed=seed, stage=stage, arch=arch)


@dataclass
class SeedResult:
    seed: int
    baseline: dict
    guided: dict
    baseline_ious: list[float] = field(repr=False, default_factory=list)
    guided_ious: list[float] = field(repr=False, default_factory=list)
    seconds: float = 0.0


def run_seed(cfg: BenchmarkConfig, seed: int, work_dir) -> SeedResult:
    work = Path(work_dir)
    t0 = time.perf_counter()
    train = generate_synthetic(work / "train", *cfg.n_train, size=cfg.size, seed=1000 + seed)
    test = generate_synthetic(work / "test", *cfg.n_test, size=cfg.size, seed=2000 + seed, split="test")
    spec = cfg.spec
    s1 = train_stage1(cfg.train_config(seed, "baseline"), train, work / "stage1")
    store = extract_priors(s1.model, train, spec, workers=cfg.workers)
    s2 = train_stage2(cfg.train_config(seed, "guided"), train, store, work / "stage2")
    m1 = evaluate(s1.model, test, spec, workers=cfg.workers)
    m2 = evaluate(s2.model, test, spec, prior_model=s1.model, prior_spec=spec, workers=cfg.workers)
    test_priors = prior_maps(s1.model, test.images(), spec, workers=cfg.workers)
    return SeedResult(
        seed,
        m1.to_dict(),
        m2.to_dict(),
        saliency_ious(s1.model, test, spec, workers=cfg.workers).tolist(),
        saliency_ious(s2.model, test, spec, test_priors, workers=cfg.workers).tolist(),
        time.perf_counter() - t0,
    )


def summarize(results: list[SeedResult]) -> dict:
    def med(key, which):
        return float(np.median([getattr(r, which)[key] for r in results]))

    iou_gain = [r.guided["iou"] - r.baseline["iou"] for r in results]
    return {
        "baseline_ap": med("ap", "baseline"),
        "guided_ap": med("ap", "guided"),
        "baseline_iou": med("iou", "baseline"),
        "guided_iou": med("iou", "guided"),
        "iou_gain": float(np.median(iou_gain)),
        "seconds": float(sum(r.seconds for r in results)),
    }


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), work_dir=None, log=None) -> dict:
    """Run every seed; returns ``{"config", "seeds", "summary"}``."""
    results = []
    with tempfile.TemporaryDirectory(prefix="kgdefect-bench-") as tmp:
        root = Path(work_dir) if work_dir is not None else Path(tmp)
        for seed in cfg.seeds:
            r = run_seed(cfg, seed, root / f"seed{seed}")
            results.append(r)
            if log is not None:
                log(
                    f"seed {seed}: AP {r.baseline['ap']:.4f} -> {r.guided['ap']:.4f}, "
                    f"IoU {r.baseline['iou']:.4f} -> {r.guided['iou']:.4f} ({r.seconds:.0f} s)"
                )
    return {
        "config": asdict(cfg),
        "seeds": [asdict(r) for r in results],
        "summary": summarize(results),
    }


def write_results(doc: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
