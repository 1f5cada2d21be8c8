"""Command-line entry point: ``vst {gen-data,train,eval,infer,census}``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .align import attention_heatmap, overlay
from .checkpoint import load_checkpoint, save_checkpoint
from .config import add_run_flags, resolve_run_config
from .data import GlyphDatasetSpec, generate_glyph_dataset, load_samples, preprocess_image, read_pnm, write_pnm
from .errors import CheckpointError, ConfigError, ContractError, NumericFailure
from .model import SEMANTIC_PREFIXES, ModelConfig, VSTModel, available_modes, decode, parameter_census
from .train import evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("vst")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _write_resolved(out_dir: Path, text: str, name="config.json"):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text, encoding="utf-8")


def cmd_gen_data(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise CommandError(f"spec file not found: {spec_path}", EXIT_CONFIG)
    try:
        spec = GlyphDatasetSpec.load(spec_path)
    except (ValueError, TypeError) as exc:
        raise CommandError(f"invalid spec {spec_path}: {exc}", EXIT_CONFIG) from exc
    try:
        manifest = generate_glyph_dataset(spec, args.out)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {args.out}: {exc}", EXIT_IO) from exc
    print(f"manifest: {manifest}")
    print(f"samples: {spec.num_samples}")
    return EXIT_OK


def _load_sets(paths, cfg):
    sets = []
    for p in paths:
        if not Path(p).is_file():
            raise CommandError(f"manifest not found: {p}", EXIT_IO)
        sets.append(load_samples(p, cfg.image_height, cfg.image_width))
        if len(sets[-1]) == 0:
            raise CommandError(f"manifest {p} has no readable samples", EXIT_IO)
    return sets


def cmd_train(args) -> int:
    try:
        run = resolve_run_config(args.config, args)
        model_cfg = run.model_config()
        train_cfg = run.train_config()
    except (ConfigError, TypeError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    if not run.train_manifests:
        raise CommandError("no train_manifests given", EXIT_CONFIG)
    out_dir = Path(run.out_dir)
    _write_resolved(out_dir, run.to_json())
    sources = _load_sets(run.train_manifests, model_cfg)
    eval_set = _load_sets([run.eval_manifest], model_cfg)[0] if run.eval_manifest else sources[0]
    model = VSTModel(model_cfg)
    log_path = out_dir / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    try:
        result = train(model, sources, train_cfg, weights=run.source_weights, eval_set=eval_set, log_path=log_path)
    except NumericFailure as exc:
        raise CommandError(f"{exc}; batch dump: {exc.dump_path}", EXIT_NUMERIC) from exc
    except ConfigError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    save_checkpoint(out_dir / "final.ckpt", model, result.optimizer)
    mode = run.eval_mode or ("full" if model.variant == "full" else "vote")
    report = evaluate(model, eval_set, mode)
    (out_dir / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"steps: {result.steps}")
    print(f"checkpoint: {out_dir / 'final.ckpt'}")
    print(report.format_table())
    return EXIT_OK


def _load_model(path):
    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}", EXIT_CONFIG)
    try:
        model, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    return model


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    if args.mode not in available_modes(model.variant):
        raise CommandError(f"mode {args.mode!r} is not available for a {model.variant} checkpoint", EXIT_CONFIG)
    if not Path(args.manifest).is_file():
        raise CommandError(f"manifest not found: {args.manifest}", EXIT_IO)
    samples = load_samples(args.manifest, model.cfg.image_height, model.cfg.image_width)
    try:
        report = evaluate(model, samples, args.mode)
    except ContractError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    print(report.format_table())
    return EXIT_OK


def _safe_char(ch):
    return ch if ch.isalnum() else "unk"


def dump_attention(trace, prediction, image: np.ndarray, out_dir) -> list:
    """Write one overlay per decoded character for each attention site.

    Sites: ``primary`` and ``secondary`` alignment maps and ``interaction``
    (last interaction layer, heads averaged, semantic query -> visual keys).
    Returns the list of written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h_img, w_img = image.shape[1:]
    gray = (image.mean(axis=0) + 1.0) * 127.5
    n = len(prediction.text)
    written = []
    for site in ("primary", "secondary", "interaction"):
        rows = prediction.attention[site][:n]
        maps = attention_heatmap(rows, trace.grid, (h_img, w_img))
        for i, (ch, heat) in enumerate(zip(prediction.text, maps)):
            path = out_dir / f"{site}_{i}_{_safe_char(ch)}.pnm"
            write_pnm(path, overlay(gray, heat))
            written.append(path)
    return written


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    try:
        raw = read_pnm(args.image)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read image {args.image}: {exc}", EXIT_IO) from exc
    mode = args.mode or ("full" if model.variant == "full" else "vote")
    if mode not in available_modes(model.variant):
        raise CommandError(f"mode {mode!r} is not available for a {model.variant} checkpoint", EXIT_CONFIG)
    image = preprocess_image(raw, model.cfg.image_height, model.cfg.image_width)
    with ad.no_grad():
        trace = model.forward(image[None])
    pred = decode(trace, mode)[0]
    print(pred.text)
    if args.dump_attention:
        paths = dump_attention(trace, pred, image, args.dump_attention)
        logger.info("wrote %d heatmaps to %s", len(paths), args.dump_attention)
    return EXIT_OK


def cmd_census(args) -> int:
    if bool(args.config) == bool(args.checkpoint):
        raise CommandError("give exactly one of --config or --checkpoint", EXIT_CONFIG)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        print(parameter_census(model).format())
        return EXIT_OK
    try:
        run = resolve_run_config(args.config, argparse.Namespace())
        cfg = run.model_config()
    except (ConfigError, TypeError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from exc
    census = parameter_census(VSTModel(cfg))
    print(census.format())
    other = ModelConfig.from_dict(dict(cfg.to_dict(), variant="basic" if cfg.variant == "full" else "full"))
    other_census = parameter_census(VSTModel(other))
    full, basic = (census, other_census) if cfg.variant == "full" else (other_census, census)
    print(f"full total:   {full.total}")
    print(f"basic total:  {basic.total}")
    print(f"delta:        {full.total - basic.total}")
    print(f"module S:     {full.subtotal(SEMANTIC_PREFIXES)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vst", description="Visual-semantic transformer text recogniser")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic glyph dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default="vote", choices=["s2", "s3", "vote", "full"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="recognise one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=["s2", "s3", "vote", "full"])
    p.add_argument("--dump-attention", metavar="DIR")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("census", help="list parameters")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_census)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
