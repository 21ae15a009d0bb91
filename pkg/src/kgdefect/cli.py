"""Command-line driver for the two-stage pipeline.

    kgdefect gen-data --out DIR --n-normal N --n-defect N --size S --seed K
    kgdefect train-baseline --data DIR --config FILE --out RUN
    kgdefect extract-priors --ckpt FILE --data DIR --explainer {gradcam|layercam|fullgrad} --out DIR
    kgdefect train-guided --data DIR --priors DIR --config FILE --out RUN
    kgdefect evaluate --ckpt FILE --data DIR --out RUN
    kgdefect explain --ckpt FILE --image FILE --explainer NAME --out RUN

Exit codes: 0 success, 1 usage error, 2 data / format / checkpoint error,
3 numeric fault. Diagnostics go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericFault
from .checkpoint import CheckpointError, checkpoint_digest, load_checkpoint, read_checkpoint
from .config import RunConfig, RunConfigError
from .data import DatasetError, generate_synthetic, load_dataset
from .explain import ALIASES, ExplainerError, ExplainerSpec, explain_maps
from .imageio import (
    FormatError,
    decode_image,
    encode_image,
    render_heatmap_overlay,
    resize_bilinear_image,
    to_float,
    to_uint8,
)
from .metrics import evaluate
from .models import ConfigError, forward
from .priors import PriorStore, PriorStoreError, extract_priors, prior_maps
from .training import train_stage1, train_stage2


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SOURCE_CKPT = "source.ckpt"
PRIOR_CKPT = "prior_model.ckpt"
REPORT = "report.json"

DATA_ERRORS = (
    CheckpointError,
    ConfigError,
    DatasetError,
    ExplainerError,
    FormatError,
    PriorStoreError,
    RunConfigError,
    OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _explainer(name: str, layers: str | None) -> ExplainerSpec:
    kind = ALIASES.get(name, name)
    parsed = None if layers in (None, "all") else tuple(int(v) for v in layers.split(","))
    return ExplainerSpec(kind, layers=parsed)


def _input_size(model) -> tuple[int, int]:
    return model.config.in_h, model.config.in_w


def _prior_model_for(ckpt: Path, manifest: dict):
    """Stage-1 network and explainer that build the prior channel of a guided checkpoint."""
    source = ckpt.parent / PRIOR_CKPT
    if not source.is_file():
        raise CheckpointError(f"guided checkpoint {ckpt} needs its stage-1 model at {source}")
    extra = manifest.get("extra", {})
    digest = checkpoint_digest(source)
    if extra.get("prior_checkpoint_digest") not in (None, digest):
        raise CheckpointError(f"{source} does not match the digest recorded in {ckpt}")
    return load_checkpoint(source), ExplainerSpec.from_dict(extra["prior_explainer"])


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    generate_synthetic(args.out, args.n_normal, args.n_defect, args.size, args.seed, split=args.split)
    return EXIT_OK


def _run_config(args, stage: str) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return RunConfig.load(args.config, overrides, stage=stage).with_run_dir(args.out)


def cmd_train_baseline(args) -> int:
    cfg = _run_config(args, "baseline")
    cfg.write_resolved(extra={"data": str(args.data)})
    data = load_dataset(args.data, cfg.input_size)
    result = train_stage1(cfg.train, data, cfg.run_dir, log_every=1)
    report = {
        "stage": "baseline",
        "checkpoint_digest": checkpoint_digest(result.checkpoint),
        "epochs": [r.record() for r in result.reports],
    }
    _write_json(cfg.run_dir / REPORT, report)
    return EXIT_OK


def cmd_extract_priors(args) -> int:
    out = Path(args.out)
    spec = _explainer(args.explainer, args.layers)
    _write_json(
        out / "resolved-config.json",
        {"ckpt": str(args.ckpt), "data": str(args.data), "explainer": spec.to_dict()},
    )
    model = load_checkpoint(args.ckpt)
    digest = checkpoint_digest(args.ckpt)
    data = load_dataset(args.data, _input_size(model))
    extract_priors(model, data, spec, digest, out, workers=args.workers)
    shutil.copyfile(args.ckpt, out / SOURCE_CKPT)
    return EXIT_OK


def cmd_train_guided(args) -> int:
    cfg = _run_config(args, "guided")
    cfg.write_resolved(extra={"data": str(args.data), "priors": str(args.priors)})
    store = PriorStore.load(args.priors)
    source = Path(args.priors) / SOURCE_CKPT
    if checkpoint_digest(source) != store.checkpoint_digest:
        raise PriorStoreError(f"{source} does not match the digest recorded in the prior index")
    data = load_dataset(args.data, cfg.input_size)
    prior_model = load_checkpoint(source)
    extra = {"prior_checkpoint_digest": store.checkpoint_digest, "prior_explainer": store.explainer.to_dict()}
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(source, cfg.run_dir / PRIOR_CKPT)
    result = train_stage2(cfg.train, data, store, cfg.run_dir, init_from=prior_model, extra=extra, log_every=1)
    report = {
        "stage": "guided",
        "checkpoint_digest": checkpoint_digest(result.checkpoint),
        "epochs": [r.record() for r in result.reports],
        **extra,
    }
    _write_json(cfg.run_dir / REPORT, report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Path(args.ckpt)
    manifest, _ = read_checkpoint(ckpt)
    model = load_checkpoint(ckpt)
    prior_model = prior_spec = None
    if model.mode == "guided":
        prior_model, prior_spec = _prior_model_for(ckpt, manifest)
    if args.explainer is not None:
        spec = _explainer(args.explainer, args.layers)
    else:
        spec = prior_spec or ExplainerSpec()
    out = Path(args.out)
    _write_json(out / "resolved-config.json", {"ckpt": str(ckpt), "data": str(args.data), "explainer": spec.to_dict()})
    data = load_dataset(args.data, _input_size(model))
    m = evaluate(model, data, spec, prior_model, prior_spec, workers=args.workers)
    report = {
        "mode": model.mode,
        "checkpoint_digest": manifest["digest"],
        "explainer": spec.to_dict(),
        "split": data.split,
        "metrics": m.to_dict(),
    }
    _write_json(out / REPORT, report)
    return EXIT_OK


def cmd_explain(args) -> int:
    ckpt = Path(args.ckpt)
    manifest, _ = read_checkpoint(ckpt)
    model = load_checkpoint(ckpt)
    spec = _explainer(args.explainer, args.layers)
    out = Path(args.out)
    _write_json(out / "resolved-config.json", {"ckpt": str(ckpt), "image": str(args.image), "explainer": spec.to_dict()})
    image = to_float(decode_image(args.image))
    if image.shape != _input_size(model):
        image = np.clip(resize_bilinear_image(image, _input_size(model)), 0.0, 1.0)
    images = image[None]
    prior = None
    if model.mode == "guided":
        prior_model, prior_spec = _prior_model_for(ckpt, manifest)
        prior = prior_maps(prior_model, images, prior_spec)[:, None]
    values = explain_maps(forward(model, images[:, None], prior, isolate=False), spec, args.target)[0]
    sample_id = Path(args.image).name.split(".")[0]
    encode_image(to_uint8(values), out / "explain" / f"{sample_id}.pgm")
    if args.overlay:
        render_heatmap_overlay(image, values, out / "explain" / f"{sample_id}.overlay.pgm")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgdefect", description="Knowledge-prior guided surface defect classification.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int, required=True)
    p.add_argument("--n-defect", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (
        ("train-baseline", cmd_train_baseline, "stage 1: plain classifier"),
        ("train-guided", cmd_train_guided, "stage 2: prior-guided network"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        if name == "train-guided":
            p.add_argument("--priors", required=True)
        p.add_argument("--config", default=None, help="flat dotted-key JSON file")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=func)

    explainer_choices = sorted(ALIASES)
    p = sub.add_parser("extract-priors", help="saliency priors and Otsu pseudo-labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--explainer", choices=explainer_choices, default="layercam")
    p.add_argument("--layers", default=None, help="comma-separated stage indices, or 'all'")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_extract_priors)

    p = sub.add_parser("evaluate", help="AP, accuracy and saliency IoU")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--explainer", choices=explainer_choices, default=None)
    p.add_argument("--layers", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="saliency heatmap for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--explainer", choices=explainer_choices, default="layercam")
    p.add_argument("--layers", default=None)
    p.add_argument("--target", type=int, choices=[0, 1], default=1)
    p.add_argument("--overlay", action="store_true", help="also write input | saliency | mask panel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericFault as exc:
        print(f"error: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
