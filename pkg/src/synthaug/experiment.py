"""End-to-end actual-vs-augmented comparison runs."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import classifier as clf
from . import gan, metrics, pca
from .datapipe import (
    LABELS,
    ImageRecord,
    ToyCorpusSpec,
    class_counts,
    dedup,
    gen_toy_corpus,
    ingest,
    load_manifest,
    preprocess,
    split,
    write_records,
)

log = logging.getLogger(__name__)

SCHEMA = "synthaug.experiment/1"
STAGES = ("corpus", "split", "gan", "generate", "classifier")
ARMS = {"actual": "Actual", "augmented": "Actual + synthetic"}


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def stage_seed(master: int, stage: str) -> int:
    """Derive a stage seed from the master seed and the stage's fixed index."""
    return int(np.random.SeedSequence([master, STAGES.index(stage)]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    schema: str = SCHEMA
    manifest: str | None = None
    toy: dict = field(default_factory=lambda: {"resolution": 28, "per_class": 80, "noise": 0.25})
    test_fraction: float | dict = 0.5
    train_per_class: int | None = 30
    dedup_threshold: int = 0
    resolution: int = 28
    gan_preset: str = "desk"
    gan_hyper: dict = field(default_factory=lambda: {"epochs": 300})
    classifier_preset: str = "desk"
    classifier_train: dict = field(default_factory=lambda: {"epochs": 15, "freeze_backbone": False})
    synthetic_counts: dict = field(default_factory=lambda: {"COVID-CXR": 100, "Normal-CXR": 100})
    pca_k: int = 2
    seed: int = 0
    seed_overrides: dict = field(default_factory=dict)
    out: str = "runs/experiment"

    def __post_init__(self):
        if self.schema != SCHEMA:
            raise ValueError(f"unsupported config schema {self.schema!r}")
        unknown = set(self.seed_overrides) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown seed stage(s) {sorted(unknown)}")
        if any(int(v) < 0 for v in self.synthetic_counts.values()):
            raise ValueError("synthetic counts must be non-negative")
        if self.manifest is None and not self.toy:
            raise ValueError("config needs a manifest path or a toy corpus spec")

    def seed_for(self, stage: str) -> int:
        if stage in self.seed_overrides:
            return int(self.seed_overrides[stage])
        return stage_seed(self.seed, stage)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config key(s) {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------- run index

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Output directory that remembers which stage produced each file."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.producers: dict[str, str] = {}
        index = self.root / "index.json"
        if index.exists():
            self.producers = {k: v["producer-stage"] for k, v in json.loads(index.read_text()).items()}

    def path(self, rel: str, stage: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.producers[rel] = stage
        return p

    def claim(self, directory: str, stage: str) -> None:
        for p in sorted((self.root / directory).rglob("*")):
            if p.is_file():
                self.producers[p.relative_to(self.root).as_posix()] = stage

    def write_index(self) -> dict:
        index = {}
        for p in sorted(self.root.rglob("*")):
            if not p.is_file() or p.name == "index.json" and p.parent == self.root:
                continue
            rel = p.relative_to(self.root).as_posix()
            stage = self.producers.get(rel)
            if stage is None:
                # sidecars inherit the producer of the file they describe
                stage = next((s for r, s in self.producers.items() if rel.startswith(r)), "unknown")
            index[rel] = {"sha256": sha256_file(p), "bytes": p.stat().st_size, "producer-stage": stage}
        (self.root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        return index


class _RunLog:
    """Mirror package logging into the run directory, without timestamps."""

    def __init__(self, path: Path):
        self.handler = logging.FileHandler(path, mode="w")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        self.logger = logging.getLogger("synthaug")

    def __enter__(self):
        self.logger.addHandler(self.handler)
        self.saved = self.logger.level
        if self.logger.getEffectiveLevel() > logging.INFO:
            self.logger.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        self.logger.removeHandler(self.handler)
        self.logger.setLevel(self.saved)
        self.handler.close()


# ---------------------------------------------------------------------- stages

def _build_corpus(cfg: ExperimentConfig) -> list[ImageRecord]:
    if cfg.manifest:
        return ingest(load_manifest(cfg.manifest))
    toy = dict(cfg.toy)
    toy.setdefault("seed", cfg.seed_for("corpus"))
    return gen_toy_corpus(ToyCorpusSpec(**toy))


def _cap_per_class(records: Sequence[ImageRecord], cap: int | None) -> list[ImageRecord]:
    if cap is None:
        return list(records)
    seen: dict[str, int] = {}
    out = []
    for r in records:
        if seen.get(r.label, 0) < cap:
            out.append(r)
            seen[r.label] = seen.get(r.label, 0) + 1
    return out


def _labels(records: Sequence[ImageRecord]) -> np.ndarray:
    return np.array([r.label_index for r in records], dtype=np.int64)


def _train_arm(cfg: ExperimentConfig, records: Sequence[ImageRecord]) -> tuple[clf.Classifier, dict]:
    x = preprocess(records, (cfg.resolution, cfg.resolution), "unit")
    y = clf.one_hot(_labels(records))
    seed = cfg.seed_for("classifier")
    bb = replace(clf.BackboneConfig.named(cfg.classifier_preset), input_size=cfg.resolution)
    train_cfg = clf.ClassifierTrainConfig(**cfg.classifier_train)
    model = clf.build_classifier(bb, clf.HeadConfig(), freeze_backbone=train_cfg.freeze_backbone, seed=seed)
    return clf.train_classifier(model, x, y, train_cfg, seed=seed)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every stage for one master seed and return the per-arm summaries."""
    run = RunDir(cfg.out)
    run.path("config.json", "config").write_text(cfg.to_json())
    with _RunLog(run.path("logs/run.log", "log")):
        result = _run_stages(cfg, run)
    run.write_index()
    return result


def _run_stages(cfg: ExperimentConfig, run: RunDir) -> dict:
    stage = "corpus"
    try:
        corpus = _build_corpus(cfg)
        corpus, removed = dedup(corpus, cfg.dedup_threshold)
        log.info("corpus: %s after removing %d near-duplicates", class_counts(corpus), len(removed))
        run.path("manifests/corpus.json", stage).write_text(json.dumps(
            {"records": [{"id": r.id, "label": r.label, "source": r.source, "hash": f"{r.hash64:016x}"}
                         for r in corpus], "removed": removed}, indent=2, sort_keys=True) + "\n")

        stage = "split"
        spec = split(corpus, cfg.test_fraction, cfg.seed_for("split"))
        by_id = {r.id: r for r in corpus}
        train = _cap_per_class([by_id[i] for i in spec.train], cfg.train_per_class)
        test = [by_id[i] for i in spec.test]
        run.path("manifests/split.json", stage).write_text(json.dumps(
            {"train": [r.id for r in train], "test": [r.id for r in test], "split": spec.to_dict()},
            indent=2, sort_keys=True) + "\n")
        log.info("train %s, test %s", class_counts(train), class_counts(test))

        stage = "gan"
        counts = {lab: int(cfg.synthetic_counts.get(lab, 0)) for lab in LABELS}
        synthetic: list[ImageRecord] = []
        if sum(counts.values()):
            model = gan.gan_preset(cfg.gan_preset, cfg.seed_for("gan"))
            xr = preprocess(train, (cfg.resolution, cfg.resolution), "symmetric")
            hyper = gan.GanHyper(**cfg.gan_hyper)
            model, state = gan.train_gan(xr, _labels(train), model, hyper, seed=cfg.seed_for("gan"))
            gan.save_checkpoint(model, state, run.path("checkpoints/gan.cgw", stage), hyper)

            stage = "generate"
            labels = gan.labels_for_counts(counts)
            images = gan.generate(model, len(labels), labels, seed=cfg.seed_for("generate"))
            synthetic = gan.synthetic_records(images, labels)
            write_records(synthetic, run.path("synthetic", stage))
            run.claim("synthetic", stage)

        test_ids = {r.id for r in test}
        leaked = [r.id for r in synthetic if r.id in test_ids or r.source != "synthetic"]
        if leaked:
            raise AssertionError(f"synthetic samples leaked into the test set: {leaked[:5]}")

        stage = "classifier"
        arms = {}
        for arm, data in (("actual", train), ("augmented", train + synthetic)):
            model_c, history = _train_arm(cfg, data)
            clf.save_classifier(model_c, run.path(f"checkpoints/clf_{arm}.cgw", stage))
            clf.write_history(history, run.path(f"reports/history_{arm}.csv", stage))
            arms[arm] = model_c

        stage = "evaluate"
        x_test = preprocess(test, (cfg.resolution, cfg.resolution), "unit")
        truth = _labels(test)
        summaries, outcomes = {}, {}
        for arm, model_c in arms.items():
            _, pred = clf.predict(model_c, x_test)
            metrics.write_predictions(run.path(f"reports/predictions_{arm}.csv", stage),
                                      [r.id for r in test], truth, pred)
            cm = metrics.confusion(pred, truth)
            summaries[arm] = metrics.compute_metrics(cm)
            outcomes[arm] = {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn}
            run.path(f"reports/{arm}.json", stage).write_text(metrics.render_report(summaries[arm], "json"))
            log.info("%s accuracy %.4f", arm, summaries[arm].accuracy)
        named = {ARMS[k]: v for k, v in summaries.items()}
        for fmt, ext in (("markdown", "md"), ("csv", "csv"), ("json", "json")):
            run.path(f"reports/comparison.{ext}", stage).write_text(metrics.render_comparison(named, fmt))

        stage = "pca"
        real_feats = clf.extract_features(arms["augmented"], preprocess(train, (cfg.resolution,) * 2, "unit"),
                                          [r.id for r in train], [r.label for r in train], ["real"] * len(train))
        parts = [real_feats]
        if synthetic:
            parts.append(clf.extract_features(
                arms["augmented"], preprocess(synthetic, (cfg.resolution,) * 2, "unit"),
                [r.id for r in synthetic], [r.label for r in synthetic], ["synthetic"] * len(synthetic)))
        feats = pca.FeatureMatrix.concat(parts)
        feats.to_csv(run.path("features/features.csv", stage))
        scores, pairs, _ = pca.fit_pca(feats, cfg.pca_k)
        pca.emit_scatter(scores, feats, run.path("features/pca_scores.csv", stage),
                         run.path("features/pca.svg", stage) if cfg.pca_k == 2 else None)
        centroids = pca.group_centroids(scores, feats.labels, feats.origins)
    except Exception as exc:
        log.error("stage %s failed: %s", stage, exc)
        raise ExperimentError(stage, exc) from exc

    return {"seed": cfg.seed, "summaries": summaries, "outcomes": outcomes,
            "accuracy": {k: v.accuracy for k, v in summaries.items()},
            "eigenvalues": pairs.values[:cfg.pca_k].tolist(),
            "centroids": {f"{k[0]}|{k[1]}": v.tolist() for k, v in centroids.items()},
            "synthetic": len(synthetic)}


def run_comparison(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2)) -> dict:
    """Repeat the experiment per master seed and average the arm accuracies."""
    root = RunDir(cfg.out)
    per_seed = []
    for s in seeds:
        res = run_experiment(replace(cfg, seed=int(s), out=str(Path(cfg.out) / f"seed_{s}")))
        per_seed.append({"seed": int(s), "accuracy": res["accuracy"], "outcomes": res["outcomes"]})
    mean = {arm: float(np.mean([r["accuracy"][arm] for r in per_seed])) for arm in ARMS}
    summary = {"seeds": list(map(int, seeds)), "per_seed": per_seed, "mean_accuracy": mean,
               "augmented_not_worse": mean["augmented"] >= mean["actual"]}
    root.path("comparison.json", "comparison").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = ["| Seed | " + " | ".join(ARMS.values()) + " |", "|---|---|---|"]
    lines += [f"| {r['seed']} | " + " | ".join(f"{r['accuracy'][a]:.4f}" for a in ARMS) + " |" for r in per_seed]
    lines.append("| mean | " + " | ".join(f"{mean[a]:.4f}" for a in ARMS) + " |")
    root.path("comparison.md", "comparison").write_text("\n".join(lines) + "\n")
    root.write_index()
    return summary
