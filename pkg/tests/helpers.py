"""Shared fixtures: hand-built traces and small random networks."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from kgdefect.autodiff import P, Tape, Tensor, precision
from kgdefect.models import ArchConfig, ForwardTrace, classifier_forward, init_model


def toy_trace(acts, grads, input_size=None) -> ForwardTrace:
    """Trace whose class-1 score is sum_l <A_l, G_l>, so dscore/dA_l == G_l exactly."""
    acts = [np.asarray(a, dtype=np.float64) for a in acts]
    size = input_size or acts[0].shape[-2:]
    with precision("float64"):
        tape = Tape()
        x = Tensor(np.zeros((acts[0].shape[0], 1, *size)))
        with tape:
            tape.probe(x)
            a_t = [tape.probe(Tensor(a)) for a in acts]
            terms = [P.sum(P.mul(a, Tensor(np.asarray(g, dtype=np.float64)))) for a, g in zip(a_t, grads)]
            score = terms[0]
            for t in terms[1:]:
                score = P.add(score, t)
            logits = P.reshape(score, (1, 1))
    return ForwardTrace(tape, x, logits, a_t, {}, {}, {}, 0.01)


def random_leaky_model(seed: int, size: int = 12):
    """Float64 baseline net with random non-zero biases and a random input, no input normalisation."""
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(1, 3))))
    cfg = ArchConfig(in_h=size, in_w=size, widths=widths, hidden=int(rng.integers(3, 8)), input_norm="none")
    with precision("float64"):
        model = init_model(cfg, seed, "baseline")
    for name in model.params:
        if name.endswith(".bias"):
            model.params[name] = rng.normal(0.0, 0.3, model.params[name].shape)
    x = rng.normal(size=(2, 1, size, size))
    return model, x


def min_preact(trace: ForwardTrace) -> float:
    return min(float(np.abs(z.data).min()) for z in trace.preacts.values())


def kink_free_trace(model, x, rng, margin: float = 1e-6, tries: int = 20) -> ForwardTrace:
    """Forward pass, nudging the input by 1e-3 until no pre-activation sits within ``margin`` of zero."""
    with precision("float64"):
        for _ in range(tries):
            _, trace = classifier_forward(model, x)
            if min_preact(trace) >= margin:
                return trace
            x = x + 1e-3 * rng.standard_normal(x.shape)
    raise AssertionError("could not move away from activation kinks")


def sigmoid_trace(seed: int) -> ForwardTrace:
    """Conv -> sigmoid -> GAP -> dense; the negative control for completeness."""
    rng = np.random.default_rng(seed)
    with precision("float64"):
        x = Tensor(rng.normal(size=(1, 1, 8, 8)))
        w, b = Tensor(rng.normal(size=(4, 1, 3, 3))), Tensor(rng.normal(size=4))
        dw, db = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=1))
        tape = Tape()
        with tape:
            tape.probe(x)
            z = tape.probe(P.conv2d(x, w, b, pad=1))
            a = tape.probe(P.sigmoid(z))
            zo = tape.probe(P.dense(P.global_avg_pool(a), dw, db))
    return ForwardTrace(tape, x, zo, [a], {"c.bias": z, "d.bias": zo}, {"c.bias": b, "d.bias": db}, {}, 0.0)


TINY_CONFIG = {
    "train.epochs": 2,
    "train.lr": 0.005,
    "data.size": 16,
    "model.widths": [4, 6],
    "model.seg_width": 4,
    "model.hidden": 6,
}


def run_cli_chain(root, seed: int = 0, explainer: str = "layercam") -> dict:
    """gen-data -> train-baseline -> extract-priors -> train-guided -> evaluate, tiny scale.

    Returns a dict of step name -> exit code, plus the directories under ``paths``.
    """
    import json
    from pathlib import Path

    from kgdefect.cli import main

    root = Path(root)
    cfg = root / "config.json"
    root.mkdir(parents=True, exist_ok=True)
    cfg.write_text(json.dumps(TINY_CONFIG))
    d = {k: root / k for k in ("train", "test", "base", "priors", "guided", "eval_base", "eval_guided")}
    steps = [
        ("gen-train", ["gen-data", "--out", d["train"], "--n-normal", 6, "--n-defect", 4, "--size", 16, "--seed", seed]),
        ("gen-test", ["gen-data", "--out", d["test"], "--n-normal", 4, "--n-defect", 3, "--size", 16,
                      "--seed", seed + 100, "--split", "test"]),
        ("train-baseline", ["train-baseline", "--data", d["train"], "--config", cfg, "--out", d["base"]]),
        ("extract-priors", ["extract-priors", "--ckpt", d["base"] / "model.ckpt", "--data", d["train"],
                            "--explainer", explainer, "--out", d["priors"]]),
        ("train-guided", ["train-guided", "--data", d["train"], "--priors", d["priors"], "--config", cfg,
                          "--out", d["guided"]]),
        ("evaluate-baseline", ["evaluate", "--ckpt", d["base"] / "model.ckpt", "--data", d["test"],
                               "--out", d["eval_base"]]),
        ("evaluate-guided", ["evaluate", "--ckpt", d["guided"] / "model.ckpt", "--data", d["test"],
                             "--out", d["eval_guided"]]),
    ]
    codes = {}
    for name, argv in steps:
        codes[name] = main([str(a) for a in argv])
        if codes[name] != 0:
            break
    return {"codes": codes, "paths": d}


def tree_bytes(root, skip=("resolved-config.json", "timing.jsonl")) -> dict:
    """Relative path -> file bytes, leaving out files that legitimately hold paths or timings."""
    from pathlib import Path

    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


# -- oracles ----------------------------------------------------------------------------


def otsu_exhaustive(hist):
    """Oracle: between-class variance in exact rationals for every t, smallest argmax."""
    hist = [int(c) for c in hist]
    total = sum(hist)
    occupied = [i for i, c in enumerate(hist) if c]
    if len(occupied) == 1:
        return occupied[0]
    best, best_t = Fraction(-1), 0
    for t in range(256):
        n0 = sum(hist[: t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * c for i, c in enumerate(hist[: t + 1])), n0)
        mu1 = Fraction(sum(i * c for i, c in enumerate(hist[t + 1 :], start=t + 1)), n1)
        var = Fraction(n0 * n1, total * total) * (mu0 - mu1) ** 2
        if var > best:
            best, best_t = var, t
    return best_t


def ap_brute_force(scores, labels):
    """Oracle: walk the ranked list, adding precision@k times the recall step at each hit."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    ap, tp = 0.0, 0
    for k, i in enumerate(ranked, start=1):
        if labels[i]:
            tp += 1
            ap += (tp / k) * (1 / n_pos)
    return ap
