"""VGG-style detection CNN with a pooled dense head."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datapipe import LABELS
from .numerics import AdamState, GradTape, ParamSet, Tensor, TrainingDivergedError, adam_step, ops
from .numerics.io import load_tensors, save_tensors
from .numerics.layers import Conv2D, Dense
from .pca import FeatureMatrix

POOL = "pool"
VGG16_LAYOUT = (64, 64, POOL, 128, 128, POOL, 256, 256, 256, POOL,
                512, 512, 512, POOL, 512, 512, 512, POOL)
DESK_LAYOUT = (16, 16, POOL, 32, 32, POOL)


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "full"
    input_size: int = 112
    layout: tuple = VGG16_LAYOUT
    weights: str = "random"   # or a CGW1 file path

    @classmethod
    def named(cls, preset: str, weights: str = "random") -> "BackboneConfig":
        if preset == "full":
            return cls("full", 112, VGG16_LAYOUT, weights)
        if preset == "desk":
            return cls("desk", 28, DESK_LAYOUT, weights)
        raise ValueError(f"unknown backbone preset {preset!r}")

    @property
    def pools(self) -> int:
        return sum(1 for item in self.layout if item == POOL)

    @property
    def out_channels(self) -> int:
        return [c for c in self.layout if c != POOL][-1]

    def feature_chain(self) -> list[tuple[int, int, int]]:
        """Spatial size and channels after each layer; pools floor odd sizes."""
        size, c, chain = self.input_size, 3, []
        for item in self.layout:
            if item == POOL:
                if size < 2:
                    raise ValueError(f"input size {self.input_size} too small for {self.pools} pooling layers")
                size //= 2
            else:
                c = item
            chain.append((size, size, c))
        return chain

    def validate(self) -> "BackboneConfig":
        if not any(c != POOL for c in self.layout):
            raise ValueError("backbone needs at least one conv layer")
        self.feature_chain()
        return self


@dataclass(frozen=True)
class HeadConfig:
    units: int = 64
    dropout: float = 0.5
    num_classes: int = 2


@dataclass(frozen=True)
class ClassifierTrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 25
    freeze_backbone: bool = True


class Classifier:
    def __init__(self, backbone: BackboneConfig, head: HeadConfig, rng: np.random.Generator):
        self.backbone = backbone.validate()
        self.head = head
        self.params = ParamSet()
        p = self.params
        self.layers: list = []
        c_in, k = 3, 0
        for item in backbone.layout:
            if item == POOL:
                self.layers.append(POOL)
                continue
            self.layers.append(Conv2D(p, f"backbone/conv{k}", c_in, item, 3, rng, 1, "same", init="glorot_uniform"))
            c_in, k = item, k + 1
        self.fc = Dense(p, "head/dense", c_in, head.units, rng, init="glorot_uniform")
        self.out = Dense(p, "head/output", head.units, head.num_classes, rng, init="glorot_uniform")

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        s = self.backbone.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ValueError(f"classifier expects (n, {s}, {s}, 3) images, got {x.shape}")
        return x

    def features(self, x) -> Tensor:
        x = self._check_input(x)
        for layer in self.layers:
            x = ops.max_pool2d(x) if layer == POOL else ops.relu(layer(x))
        return ops.relu(self.fc(ops.global_avg_pool(x)))

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = ops.dropout(self.features(x), self.head.dropout, training, rng)
        return ops.softmax(self.out(h))

    def set_backbone_trainable(self, flag: bool) -> None:
        self.params.set_trainable(flag, prefix="backbone/")

    def backbone_state(self) -> dict[str, bytes]:
        return {k: v for k, v in self.params.snapshot_bytes().items() if k.startswith("backbone/")}


def build_classifier(backbone: BackboneConfig = BackboneConfig(), head: HeadConfig = HeadConfig(),
                     freeze_backbone: bool = False, seed: int = 0) -> Classifier:
    model = Classifier(backbone, head, np.random.default_rng(seed))
    if backbone.weights != "random":
        load_backbone_weights(model, backbone.weights)
    if freeze_backbone:
        model.set_backbone_trainable(False)
    return model


def load_backbone_weights(model: Classifier, path: str | os.PathLike) -> None:
    tensors = load_tensors(path)
    subset = {k: v for k, v in tensors.items() if k.startswith("backbone/")}
    expected = {k for k in model.params.names() if k.startswith("backbone/")}
    missing = expected - set(subset)
    if missing:
        raise KeyError(f"{path}: missing backbone tensors {sorted(missing)[:3]}")
    model.params.load_state_dict(subset, strict=False)


def one_hot(labels: Sequence[int], num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes, dtype=np.float32)[labels]


def _check_training_data(x: np.ndarray, y: np.ndarray, k: int) -> None:
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("classifier inputs must be scaled to [0, 1]")
    if y.shape != (len(x), k) or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError(f"labels must be one-hot with shape ({len(x)}, {k})")


def train_classifier(model: Classifier, images, targets, cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
                     seed: int = 0) -> tuple[Classifier, dict[str, list[float]]]:
    """Mini-batch Adam on categorical cross-entropy.

    Returns per-epoch mean loss and accuracy over the shuffled training
    batches (dropout active), the same quantities a Keras fit log shows.
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    y = np.asarray(targets, dtype=np.float32)
    model._check_input(x[:1] if len(x) else np.zeros((0, model.backbone.input_size, model.backbone.input_size, 3)))
    _check_training_data(x, y, model.head.num_classes)
    if cfg.freeze_backbone:
        model.set_backbone_trainable(False)
    rng = np.random.default_rng(seed)
    opt = AdamState.for_params(model.params, learning_rate=cfg.learning_rate, beta1=cfg.beta1,
                               beta2=cfg.beta2, epsilon=cfg.epsilon)
    history: dict[str, list[float]] = {"loss": [], "accuracy": []}
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = correct = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            with GradTape() as tape:
                probs = model(x[idx], training=True, rng=rng)
                loss = ops.categorical_crossentropy(probs, y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite classifier loss at epoch {epoch} batch {b}")
            adam_step(model.params, tape.gradient(loss, model.params), opt)
            loss_sum += value * len(idx)
            correct += float(np.sum(probs.data.argmax(1) == y[idx].argmax(1)))
        history["loss"].append(loss_sum / n)
        history["accuracy"].append(correct / n)
    return model, history


def predict(model: Classifier, images, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and argmax labels (ties go to the lower index)."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    model._check_input(x[:1] if len(x) else np.zeros((0,) + x.shape[1:]))
    probs = np.concatenate([model(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]) \
        if len(x) else np.zeros((0, model.head.num_classes), np.float32)
    return probs, probs.argmax(axis=1)


def extract_features(model: Classifier, images, ids: Sequence[str] | None = None,
                     labels: Sequence[str] | None = None, origins: Sequence[str] | None = None,
                     batch_size: int = 128) -> FeatureMatrix:
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    feats = [model.features(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    values = np.concatenate(feats) if feats else np.zeros((0, model.head.units))
    return FeatureMatrix(values.astype(np.float64), list(ids or []), list(labels or []), list(origins or []))


# ------------------------------------------------------------------ persistence

def save_classifier(model: Classifier, path: str | os.PathLike) -> None:
    path = Path(path)
    save_tensors(path, model.params.state_dict())
    meta = {"format": "CGW1", "backbone": asdict(model.backbone), "head": asdict(model.head)}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_classifier(path: str | os.PathLike) -> Classifier:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    bb = dict(meta["backbone"])
    bb["layout"] = tuple(bb["layout"])
    bb["weights"] = "random"
    model = build_classifier(BackboneConfig(**bb), HeadConfig(**meta["head"]))
    model.params.load_state_dict(load_tensors(path))
    return model


def write_history(history: dict[str, list[float]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for i, (loss, acc) in enumerate(zip(history["loss"], history["accuracy"])):
            w.writerow([i + 1, repr(loss), repr(acc)])


def label_names(indices: Sequence[int]) -> list[str]:
    return [LABELS[int(i)] for i in indices]
