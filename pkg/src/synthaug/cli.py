"""Command-line entry point: ``synthaug <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import gan, metrics, pca
from .datapipe import (
    LABELS,
    DatasetManifest,
    IngestError,
    ManifestEntry,
    ToyCorpusSpec,
    dedup,
    gen_toy_corpus,
    ingest,
    ingest_report,
    load_manifest,
    preprocess,
    record_ids,
    split,
    write_records,
)
from .experiment import ExperimentConfig, RunDir, run_comparison, run_experiment
from .numerics import CheckpointFormatError, TrainingDivergedError

log = logging.getLogger("synthaug.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _records_for(manifest_path: str, split_path: str | None, part: str | None):
    records = ingest(load_manifest(manifest_path))
    if split_path and part:
        wanted = json.loads(Path(split_path).read_text())
        ids = set(wanted["split"][part] if "split" in wanted else wanted[part])
        records = [r for r in records if r.id in ids]
    if not records:
        raise ValueError("no records selected")
    return records


# -------------------------------------------------------------------- commands

def cmd_ingest(args, run: RunDir) -> None:
    records = ingest(load_manifest(args.manifest), workers=args.workers)
    _dump(run.path("reports/ingest.json", "ingest"), ingest_report(records))
    print(f"ingested {len(records)} images")


def cmd_dedup(args, run: RunDir) -> None:
    manifest = load_manifest(args.manifest)
    records = ingest(manifest)
    kept, removed = dedup(records, args.threshold)
    kept_ids = {r.id for r in kept}
    entries = [e for e, rid in zip(manifest.entries, record_ids(manifest)) if rid in kept_ids]
    target = run.path("manifests/dedup.json", "dedup")
    # keep paths valid relative to the new manifest's directory
    moved = [ManifestEntry(os.path.relpath(manifest.resolve(e).resolve(), target.parent.resolve()), e.label, e.source)
             for e in entries]
    DatasetManifest(moved).save(target)
    _dump(run.path("reports/dedup.json", "dedup"), {"kept": len(kept), "removed": removed})
    print(f"kept {len(kept)}, removed {len(removed)}")


def cmd_toy_gen(args, run: RunDir) -> None:
    spec = ToyCorpusSpec(args.resolution, args.per_class, args.noise, args.seed)
    records = gen_toy_corpus(spec)
    write_records(records, run.root)
    run.claim("images", "toy-gen")
    run.producers["manifest.json"] = "toy-gen"
    print(f"wrote {len(records)} images")


def cmd_split(args, run: RunDir) -> None:
    fraction = json.loads(args.test_fraction) if args.test_fraction.startswith("{") else float(args.test_fraction)
    spec = split(ingest(load_manifest(args.manifest)), fraction, args.seed)
    _dump(run.path("split.json", "split"), spec.to_dict())
    print(f"train {len(spec.train)}, test {len(spec.test)}")


def cmd_train_gan(args, run: RunDir) -> None:
    records = _records_for(args.manifest, args.split, "train")
    model = gan.gan_preset(args.preset, args.seed)
    res = model.gen_cfg.resolution
    hyper = gan.GanHyper(batch_size=args.batch_size, epochs=args.epochs)
    x = preprocess(records, (res, res), "symmetric")
    y = np.array([r.label_index for r in records])
    model, state = gan.train_gan(x, y, model, hyper, seed=args.seed, audit=args.audit)
    gan.save_checkpoint(model, state, run.path("checkpoints/gan.cgw", "train-gan"), hyper)
    print(f"trained {state.batches} batches over {state.epoch} epochs")


def cmd_generate(args, run: RunDir) -> None:
    model, _, _ = gan.load_checkpoint(args.checkpoint)
    counts = dict(gan.PAPER_SYNTHETIC_COUNTS) if args.paper_counts else \
        {LABELS[0]: args.count_covid, LABELS[1]: args.count_normal}
    labels = gan.labels_for_counts(counts)
    images = gan.generate(model, len(labels), labels, seed=args.seed)
    write_records(gan.synthetic_records(images, labels), run.path("synthetic", "generate"))
    run.claim("synthetic", "generate")
    print(f"generated {len(labels)} images")


def cmd_train_clf(args, run: RunDir) -> None:
    records = _records_for(args.manifest, args.split, "train")
    if args.synthetic:
        records = records + ingest(load_manifest(args.synthetic))
    bb = clf.BackboneConfig.named(args.preset, args.weights)
    cfg = clf.ClassifierTrainConfig(batch_size=args.batch_size, epochs=args.epochs, freeze_backbone=args.freeze)
    model = clf.build_classifier(bb, clf.HeadConfig(), cfg.freeze_backbone, seed=args.seed)
    size = bb.input_size
    x = preprocess(records, (size, size), "unit")
    y = clf.one_hot([r.label_index for r in records])
    model, history = clf.train_classifier(model, x, y, cfg, seed=args.seed)
    clf.save_classifier(model, run.path("checkpoints/classifier.cgw", "train-clf"))
    clf.write_history(history, run.path("reports/history.csv", "train-clf"))
    print(f"final training accuracy {history['accuracy'][-1]:.4f}" if history["accuracy"] else "no epochs run")


def cmd_evaluate(args, run: RunDir) -> None:
    if args.pred:
        _, truth, pred = metrics.read_predictions(args.pred)
    else:
        if not (args.checkpoint and args.manifest):
            raise ValueError("evaluate needs --pred, or --checkpoint with --manifest")
        model = clf.load_classifier(args.checkpoint)
        records = _records_for(args.manifest, args.split, "test")
        size = model.backbone.input_size
        x = preprocess(records, (size, size), "unit")
        _, labels = clf.predict(model, x)
        truth = [r.label for r in records]
        pred = clf.label_names(labels)
        metrics.write_predictions(run.path("reports/predictions.csv", "evaluate"), [r.id for r in records], truth, pred)
        feats = clf.extract_features(model, x, [r.id for r in records], truth, [
            "synthetic" if r.source == "synthetic" else "real" for r in records])
        feats.to_csv(run.path("features/features.csv", "evaluate"))
    summary = metrics.compute_metrics(metrics.confusion(pred, truth, args.positive))
    for fmt, ext in (("markdown", "md"), ("csv", "csv"), ("json", "json")):
        run.path(f"reports/summary.{ext}", "evaluate").write_text(metrics.render_report(summary, fmt))
    print(metrics.render_report(summary, "markdown"), end="")


def cmd_pca(args, run: RunDir) -> None:
    feats = pca.FeatureMatrix.from_csv(args.features)
    scores, pairs, _ = pca.fit_pca(feats, args.k)
    pca.emit_scatter(scores, feats, run.path("pca/scores.csv", "pca"),
                     run.path("pca/scatter.svg", "pca") if args.k == 2 else None)
    _dump(run.path("pca/eigenvalues.json", "pca"), {"eigenvalues": pairs.values.tolist(), "sweeps": pairs.sweeps})
    print("eigenvalues: " + ", ".join(f"{v:.4f}" for v in pairs.values[:args.k]))


def cmd_report(args, run: RunDir) -> None:
    summaries = [metrics.parse_report(Path(p).read_text()) for p in args.summary]
    names = args.names or [Path(p).stem for p in args.summary]
    if len(names) != len(summaries):
        raise ValueError("--names must match the number of --summary files")
    ext = {"markdown": "md", "csv": "csv", "json": "json"}[args.format]
    if len(summaries) == 1:
        text = metrics.render_report(summaries[0], args.format)
    else:
        text = metrics.render_comparison(dict(zip(names, summaries)), args.format)
    run.path(f"reports/report.{ext}", "report").write_text(text)
    print(text, end="")


def cmd_experiment(args, run: RunDir) -> None:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, out=str(run.root), seed=args.seed if args.seed is not None else cfg.seed)
    if args.gan_epochs is not None:
        cfg = replace(cfg, gan_hyper={**cfg.gan_hyper, "epochs": args.gan_epochs})
    if args.seeds:
        summary = run_comparison(cfg, args.seeds)
        print(json.dumps(summary["mean_accuracy"], sort_keys=True))
    else:
        result = run_experiment(cfg)
        print(json.dumps({k: round(v, 4) for k, v in result["accuracy"].items()}, sort_keys=True))


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with option defaults")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--log-level", default=argparse.SUPPRESS)

    p = _Parser(prog="synthaug", description="Conditional-GAN augmentation for two-class image detection.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "read a manifest and report class/source counts")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("dedup", cmd_dedup, "drop near-duplicate images by average hash")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--threshold", type=int, default=0)

    sp = add("toy-gen", cmd_toy_gen, "render the procedural two-class corpus")
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--resolution", type=int, default=28)
    sp.add_argument("--noise", type=float, default=0.2)

    sp = add("split", cmd_split, "stratified train/test split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--test-fraction", default="0.2", help="float, or JSON mapping label -> fraction")

    sp = add("train-gan", cmd_train_gan, "train the conditional GAN")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split")
    sp.add_argument("--preset", choices=("full", "desk"), default="desk")
    sp.add_argument("--epochs", type=int, default=gan.GanHyper.epochs)
    sp.add_argument("--batch-size", type=int, default=gan.GanHyper.batch_size)
    sp.add_argument("--audit", action="store_true", help="verify the discriminator is frozen each step")

    sp = add("generate", cmd_generate, "sample labelled synthetic images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count-covid", type=int, default=0)
    sp.add_argument("--count-normal", type=int, default=0)
    sp.add_argument("--paper-counts", action="store_true", help="1669 COVID-CXR and 1399 Normal-CXR")

    sp = add("train-clf", cmd_train_clf, "train the detection classifier")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split")
    sp.add_argument("--synthetic", help="manifest of generated images to add to training")
    sp.add_argument("--preset", choices=("full", "desk"), default="desk")
    sp.add_argument("--weights", default="random", help="CGW1 file with backbone weights")
    sp.add_argument("--epochs", type=int, default=clf.ClassifierTrainConfig.epochs)
    sp.add_argument("--batch-size", type=int, default=clf.ClassifierTrainConfig.batch_size)
    sp.add_argument("--freeze", action=argparse.BooleanOptionalAction, default=False)

    sp = add("evaluate", cmd_evaluate, "score predictions against ground truth")
    sp.add_argument("--pred", help="CSV with id,true_label,predicted_label")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--split")
    sp.add_argument("--positive", default=LABELS[0])

    sp = add("pca", cmd_pca, "project a feature dump onto principal components")
    sp.add_argument("--features", required=True)
    sp.add_argument("--k", type=int, default=2)

    sp = add("report", cmd_report, "render one or more JSON summaries as a table")
    sp.add_argument("--summary", action="append", required=True)
    sp.add_argument("--names", nargs="*")
    sp.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")

    sp = add("experiment", cmd_experiment, "run the actual-vs-augmented comparison")
    sp.add_argument("--seeds", type=int, nargs="*")
    sp.add_argument("--gan-epochs", type=int)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str], args) -> argparse.Namespace:
    """Re-parse with defaults taken from the --config JSON; explicit flags win."""
    path = getattr(args, "config", None)
    if not path or args.command == "experiment":
        return args
    values = json.loads(Path(path).read_text())
    if not isinstance(values, dict):
        raise ValueError("--config must hold a JSON object")
    known = vars(args)
    extra = {k.replace("-", "_") for k in values} - set(known) - {"seed", "out", "log_level"}
    if extra:
        raise ValueError(f"unknown option(s) in {path}: {sorted(extra)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
    return parser.parse_args(argv)


def _setup_logging(level: str | None) -> None:
    level = os.environ.get("SYNTHAUG_LOG") or level or "WARNING"
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, argv, args)
        _setup_logging(getattr(args, "log_level", None))
        if not hasattr(args, "seed"):
            args.seed = None if args.command == "experiment" else 0
        run = RunDir(getattr(args, "out", None) or f"runs/{args.command}")
        args.func(args, run)
        run.write_index()
        return 0
    except UsageError as exc:
        print(f"synthaug: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, IngestError, FileNotFoundError, CheckpointFormatError) as exc:
        print(f"synthaug: invalid input: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, RuntimeError, OSError, AssertionError) as exc:
        print(f"synthaug: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
