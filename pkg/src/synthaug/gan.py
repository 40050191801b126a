"""Class-conditional GAN with an auxiliary-classifier discriminator.

The generator maps (latent noise, class label) to an image in [-1, 1]; the
discriminator returns a realness probability and a class distribution. The
full preset yields 112x112x3 images; the desk preset 28x28x3.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datapipe import LABELS, ImageRecord
from .numerics import AdamState, GradTape, ParamSet, Tensor, TrainingDivergedError, adam_step, ops
from .numerics.io import CheckpointFormatError, load_tensors, save_tensors
from .numerics.layers import BatchNorm, Conv2D, Conv2DTranspose, Dense, Embedding

log = logging.getLogger(__name__)

# images emitted per class for the augmented training set of the original study
PAPER_SYNTHETIC_COUNTS = {"COVID-CXR": 1669, "Normal-CXR": 1399}


class GanConfigError(ValueError):
    pass


class DiscriminatorMutatedError(AssertionError):
    pass


# ---------------------------------------------------------------------- configs

@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 100
    num_classes: int = 2
    embed_dim: int = 50
    base_size: int = 7
    noise_channels: int = 1024
    channels: tuple[int, ...] = (512, 256, 128, 3)
    kernel: int = 5
    stride: int = 2
    resolution: int = 112
    noise_stddev: float = 1.0
    init_stddev: float = 0.02
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    @property
    def label_units(self) -> int:
        return self.base_size * self.base_size

    def validate(self) -> "GeneratorConfig":
        if not self.channels or self.channels[-1] != 3:
            raise GanConfigError(f"channel schedule must end in 3, got {self.channels}")
        expected = self.base_size * self.stride ** len(self.channels)
        if expected != self.resolution:
            raise GanConfigError(
                f"resolution {self.resolution} inconsistent with {len(self.channels)} upsampling layers "
                f"of stride {self.stride} from {self.base_size} (gives {expected})")
        if min(self.latent_dim, self.embed_dim, self.noise_channels, self.num_classes) < 1:
            raise GanConfigError("dimensions must be positive")
        return self

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: int = 112
    image_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    strides: tuple[int, ...] = (1, 2, 2, 2, 2)
    kernel: int = 3
    leaky_slope: float = 0.2
    dropout: float = 0.5
    num_classes: int = 2
    init_stddev: float = 0.02
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def feature_chain(self) -> list[tuple[int, int, int]]:
        size, chain = self.input_size, []
        for c, s in zip(self.channels, self.strides):
            size = -(-size // s)
            chain.append((size, size, c))
        return chain

    def validate(self) -> "DiscriminatorConfig":
        if not self.channels or len(self.channels) != len(self.strides):
            raise GanConfigError(f"channel schedule {self.channels} and strides {self.strides} disagree")
        if any(s < 1 for s in self.strides):
            raise GanConfigError(f"strides must be positive: {self.strides}")
        if not 0 <= self.dropout < 1:
            raise GanConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        return self

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiscriminatorConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["strides"] = tuple(d["strides"])
        return cls(**d)


@dataclass(frozen=True)
class GanHyper:
    batch_size: int = 64
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 2000


def generator_preset(name: str) -> GeneratorConfig:
    if name == "full":
        return GeneratorConfig()
    if name == "desk":
        # channel widths / 8, two upsampling layers: 7 -> 14 -> 28
        return GeneratorConfig(noise_channels=128, channels=(64, 3), resolution=28)
    raise GanConfigError(f"unknown preset {name!r}")


def discriminator_preset(name: str) -> DiscriminatorConfig:
    if name == "full":
        return DiscriminatorConfig()
    if name == "desk":
        # 28 -> 28 -> 14 -> 7, ending on a 7x7 map like the full network
        return DiscriminatorConfig(input_size=28, channels=(16, 32, 64), strides=(1, 2, 2))
    raise GanConfigError(f"unknown preset {name!r}")


# ----------------------------------------------------------------------- models

class Generator:
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg.validate()
        self.params = ParamSet()
        p, sd = self.params, cfg.init_stddev
        self.embedding = Embedding(p, "generator/label_embedding", cfg.num_classes, cfg.embed_dim, rng, sd)
        self.label_dense = Dense(p, "generator/label_dense", cfg.embed_dim, cfg.label_units, rng, stddev=sd)
        self.noise_dense = Dense(p, "generator/noise_dense", cfg.latent_dim,
                                 cfg.label_units * cfg.noise_channels, rng, stddev=sd)
        c_in = cfg.noise_channels + 1
        self.ups, self.norms = [], []
        for i, c_out in enumerate(cfg.channels):
            self.ups.append(Conv2DTranspose(p, f"generator/up{i}", c_in, c_out, cfg.kernel, rng, cfg.stride, stddev=sd))
            if i < len(cfg.channels) - 1:
                self.norms.append(BatchNorm(p, f"generator/bn{i}", c_out, cfg.bn_momentum, cfg.bn_epsilon))
            c_in = c_out
        self.trace: list[tuple[int, ...]] = []

    def __call__(self, z, labels, training: bool = False, update_stats: bool = True) -> Tensor:
        cfg = self.cfg
        z = z if isinstance(z, Tensor) else Tensor(z, dtype=self.params.dtype)
        labels = np.asarray(labels)
        n, b = z.shape[0], cfg.base_size
        if labels.shape != (n,):
            raise ValueError(f"need one label per latent vector, got {labels.shape} for {n}")
        lab = ops.reshape(self.label_dense(self.embedding(labels)), (n, b, b, 1))
        noise = ops.relu(self.noise_dense(z))
        noise = ops.reshape(noise, (n, b, b, cfg.noise_channels))
        x = ops.concat([noise, lab], axis=-1)
        self.trace = [x.shape[1:]]
        for i, up in enumerate(self.ups):
            x = up(x)
            self.trace.append(x.shape[1:])
            if i < len(self.norms):
                x = ops.relu(self.norms[i](x, training, update_stats))
        return ops.tanh(x)


class Discriminator:
    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg.validate()
        self.params = ParamSet()
        p, sd = self.params, cfg.init_stddev
        self.convs, self.norms = [], []
        c_in = cfg.image_channels
        for i, (c_out, s) in enumerate(zip(cfg.channels, cfg.strides)):
            self.convs.append(Conv2D(p, f"discriminator/conv{i}", c_in, c_out, cfg.kernel, rng, s, stddev=sd))
            self.norms.append(BatchNorm(p, f"discriminator/bn{i}", c_out, cfg.bn_momentum, cfg.bn_epsilon))
            c_in = c_out
        h, w, c = cfg.feature_chain()[-1]
        flat = h * w * c
        self.source_head = Dense(p, "discriminator/source", flat, 1, rng, stddev=sd)
        self.class_head = Dense(p, "discriminator/class", flat, cfg.num_classes, rng, stddev=sd)
        self.trace: list[tuple[int, ...]] = []

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None,
                 update_stats: bool = True) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.params.dtype)
        expected = (cfg.input_size, cfg.input_size, cfg.image_channels)
        if x.shape[1:] != expected:
            raise ValueError(f"discriminator expects images of shape {expected}, got {x.shape[1:]}")
        self.trace = []
        for conv, bn in zip(self.convs, self.norms):
            x = conv(x)
            self.trace.append(x.shape[1:])
            x = ops.leaky_relu(bn(x, training, update_stats), cfg.leaky_slope)
            x = ops.dropout(x, cfg.dropout, training, rng)
        x = ops.flatten(x)
        return ops.sigmoid(self.source_head(x)), ops.softmax(self.class_head(x))

    @contextmanager
    def frozen(self):
        """Stop gradients into discriminator weights for the duration."""
        saved = {name: p.requires_grad for name, p in self.params.items()}
        for _, p in self.params.items():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = saved[name]


def build_generator(cfg: GeneratorConfig, rng: np.random.Generator | int = 0) -> Generator:
    return Generator(cfg, np.random.default_rng(rng))


def build_discriminator(cfg: DiscriminatorConfig, rng: np.random.Generator | int = 0) -> Discriminator:
    return Discriminator(cfg, np.random.default_rng(rng))


@dataclass
class GanModel:
    generator: Generator
    discriminator: Discriminator

    @property
    def gen_cfg(self) -> GeneratorConfig:
        return self.generator.cfg

    @property
    def disc_cfg(self) -> DiscriminatorConfig:
        return self.discriminator.cfg

    def param_count(self) -> int:
        return self.generator.params.count() + self.discriminator.params.count()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.generator.params.state_dict())
        out.update(self.discriminator.params.state_dict())
        return out


def build_gan(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int = 0) -> GanModel:
    if gen_cfg.resolution != disc_cfg.input_size:
        raise GanConfigError(f"generator emits {gen_cfg.resolution}px, discriminator expects {disc_cfg.input_size}px")
    if gen_cfg.num_classes != disc_cfg.num_classes:
        raise GanConfigError("generator and discriminator disagree on the class count")
    g_seed, d_seed = np.random.SeedSequence(seed).spawn(2)
    return GanModel(build_generator(gen_cfg, np.random.default_rng(g_seed)),
                    build_discriminator(disc_cfg, np.random.default_rng(d_seed)))


def gan_preset(name: str, seed: int = 0) -> GanModel:
    return build_gan(generator_preset(name), discriminator_preset(name), seed)


# --------------------------------------------------------------------- training

HISTORY_KEYS = ("d_source", "d_class", "g_source", "g_class")


@dataclass
class GanTrainState:
    seed: int
    rng: np.random.Generator
    adam_g: AdamState
    adam_d: AdamState
    epoch: int = 0
    batch_in_epoch: int = 0
    batches: int = 0
    perm: np.ndarray | None = None
    audits: int = 0
    history: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in HISTORY_KEYS})

    @classmethod
    def start(cls, model: GanModel, hyper: GanHyper, seed: int) -> "GanTrainState":
        opt = dict(learning_rate=hyper.learning_rate, beta1=hyper.beta1, beta2=hyper.beta2, epsilon=hyper.epsilon)
        return cls(seed=seed, rng=np.random.default_rng(seed),
                   adam_g=AdamState.for_params(model.generator.params, **opt),
                   adam_d=AdamState.for_params(model.discriminator.params, **opt))


def sample_latent(rng: np.random.Generator, n: int, cfg: GeneratorConfig) -> np.ndarray:
    return (rng.standard_normal((n, cfg.latent_dim)) * cfg.noise_stddev).astype(np.float32)


def _train_step(model: GanModel, xr: np.ndarray, yr: np.ndarray, state: GanTrainState,
                audit: bool) -> dict[str, float]:
    G, D, rng = model.generator, model.discriminator, state.rng
    k = model.gen_cfg.num_classes
    m = len(xr)

    # discriminator: real half labelled 1, generated half labelled 0
    yf = rng.integers(0, k, m)
    xf = G(sample_latent(rng, m, G.cfg), yf, training=True)
    with GradTape() as tape:
        s_real, c_real = D(xr, training=True, rng=rng)
        s_fake, c_fake = D(xf.data, training=True, rng=rng)
        d_src = (ops.binary_crossentropy(s_real, np.ones((m, 1))) +
                 ops.binary_crossentropy(s_fake, np.zeros((m, 1)))) * 0.5
        d_cls = (ops.sparse_categorical_crossentropy(c_real, yr) +
                 ops.sparse_categorical_crossentropy(c_fake, yf)) * 0.5
        d_loss = d_src + d_cls
    adam_step(D.params, tape.gradient(d_loss, D.params), state.adam_d)

    # generator through the frozen discriminator, fakes labelled real
    yg = rng.integers(0, k, 2 * m)
    before = D.params.snapshot_bytes() if audit else None
    with D.frozen(), GradTape() as tape:
        xg = G(sample_latent(rng, 2 * m, G.cfg), yg, training=True)
        s, c = D(xg, training=True, rng=rng, update_stats=False)
        g_src = ops.binary_crossentropy(s, np.ones((2 * m, 1)))
        g_cls = ops.sparse_categorical_crossentropy(c, yg)
        g_loss = g_src + g_cls
    adam_step(G.params, tape.gradient(g_loss, G.params), state.adam_g)
    if audit:
        if D.params.snapshot_bytes() != before:
            raise DiscriminatorMutatedError(f"discriminator changed during generator step {state.batches}")
        state.audits += 1
    return {"d_source": d_src.item(), "d_class": d_cls.item(), "g_source": g_src.item(), "g_class": g_cls.item()}


def _check_real_data(images: np.ndarray, labels: np.ndarray, model: GanModel) -> None:
    cfg = model.disc_cfg
    if images.ndim != 4 or images.shape[1:] != (cfg.input_size, cfg.input_size, cfg.image_channels):
        raise ValueError(f"real images must be (n, {cfg.input_size}, {cfg.input_size}, {cfg.image_channels}), "
                         f"got {images.shape}")
    if labels.shape != (len(images),):
        raise ValueError("need exactly one label per image")
    if images.size and (images.min() < -1.0 - 1e-6 or images.max() > 1.0 + 1e-6):
        raise ValueError("real images must be scaled to [-1, 1]")
    missing = set(range(cfg.num_classes)) - set(np.unique(labels).tolist())
    if missing:
        raise ValueError(f"no real samples for class(es) {sorted(missing)}")


def train_gan(images, labels, model: GanModel, hyper: GanHyper = GanHyper(), *, seed: int = 0,
              state: GanTrainState | None = None, max_batches: int | None = None,
              audit: bool = False) -> tuple[GanModel, GanTrainState]:
    """Alternate one discriminator and one generator Adam step per batch.

    An epoch is one shuffled pass over the real images in half-batches. Pass
    ``state`` to resume; ``max_batches`` stops early (resumable). With
    ``audit`` every generator step verifies the discriminator is untouched.
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    _check_real_data(x, y, model)
    if state is None:
        state = GanTrainState.start(model, hyper, seed)
    half = max(1, hyper.batch_size // 2)
    n = len(x)
    done = 0
    while state.epoch < hyper.epochs:
        if state.perm is None:
            state.perm = state.rng.permutation(n)
            state.batch_in_epoch = 0
        while state.batch_in_epoch * half < n:
            if max_batches is not None and done >= max_batches:
                return model, state
            idx = state.perm[state.batch_in_epoch * half:(state.batch_in_epoch + 1) * half]
            losses = _train_step(model, x[idx], y[idx], state, audit)
            bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
            if bad:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {state.epoch} batch {state.batch_in_epoch}: {bad}")
            for key, v in losses.items():
                state.history[key].append(v)
            state.batch_in_epoch += 1
            state.batches += 1
            done += 1
        state.epoch += 1
        state.perm = None
        if state.epoch % 50 == 0:
            log.info("epoch %d: %s", state.epoch,
                     {k: round(v[-1], 4) for k, v in state.history.items() if v})
    return model, state


# ------------------------------------------------------------------- generation

def generate(model: GanModel, n: int, labels: Sequence[int], seed: int = 0, chunk: int = 256) -> Tensor:
    """Sample ``n`` images for the requested class indices (inference mode)."""
    labels = np.asarray(labels, dtype=np.int64)
    k = model.gen_cfg.num_classes
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(seed)
    z = sample_latent(rng, n, model.gen_cfg)
    res = model.gen_cfg.resolution
    out = np.empty((n, res, res, 3), dtype=np.float32)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        out[sl] = model.generator(z[sl], labels[sl], training=False).data
    return Tensor(out)


def labels_for_counts(counts: Mapping[str, int]) -> np.ndarray:
    """Class-index vector with ``counts[label]`` entries per label, in label order."""
    return np.concatenate([np.full(int(counts.get(lab, 0)), i, dtype=np.int64)
                           for i, lab in enumerate(LABELS)])


def to_uint8(images) -> np.ndarray:
    """Map symmetric-range images back to 8-bit pixels."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    return np.clip(np.rint((x.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def synthetic_records(images, labels: Sequence[int], prefix: str = "syn") -> list[ImageRecord]:
    px = to_uint8(images)
    return [ImageRecord.create(f"{prefix}_{LABELS[int(lab)].split('-')[0].lower()}_{i:05d}", "synthetic",
                               px[i], LABELS[int(lab)])
            for i, lab in enumerate(labels)]


# ------------------------------------------------------------------ checkpoints

def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _history_path(path: Path) -> Path:
    return path.with_name(path.name + ".history.csv")


def save_checkpoint(model: GanModel, state: GanTrainState | None, path: str | os.PathLike,
                    hyper: GanHyper | None = None) -> None:
    """Write tensors as CGW1 plus a JSON sidecar and a loss-history CSV."""
    path = Path(path)
    tensors = model.state_dict()
    sidecar = {
        "format": "CGW1",
        "config": {"generator": asdict(model.gen_cfg), "discriminator": asdict(model.disc_cfg),
                   "hyper": asdict(hyper) if hyper else None},
        "epoch": 0, "seed": None, "loss_history_path": None,
    }
    if state is not None:
        for tag, opt in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
            for name in opt.m:
                tensors[f"{tag}/m/{name}"] = opt.m[name]
                tensors[f"{tag}/v/{name}"] = opt.v[name]
        hist = _history_path(path)
        with open(hist, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch", *HISTORY_KEYS])
            for i, row in enumerate(zip(*(state.history[k] for k in HISTORY_KEYS))):
                w.writerow([i, *(repr(v) for v in row)])
        sidecar.update({
            "epoch": state.epoch, "seed": state.seed, "loss_history_path": hist.name,
            "batch_in_epoch": state.batch_in_epoch, "batches": state.batches, "audits": state.audits,
            "perm": None if state.perm is None else state.perm.tolist(),
            "rng_state": state.rng.bit_generator.state,
            "adam": {"g": state.adam_g.hyper(), "d": state.adam_d.hyper()},
        })
    save_tensors(path, tensors)
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[GanModel, GanTrainState | None, GanHyper | None]:
    path = Path(path)
    tensors = load_tensors(path)
    try:
        sidecar = json.loads(_sidecar_path(path).read_text())
    except FileNotFoundError as exc:
        raise CheckpointFormatError(f"missing sidecar for {path}") from exc
    if sidecar.get("format") != "CGW1":
        raise CheckpointFormatError(f"unsupported checkpoint format {sidecar.get('format')!r}")
    cfg = sidecar["config"]
    model = build_gan(GeneratorConfig.from_dict(cfg["generator"]),
                      DiscriminatorConfig.from_dict(cfg["discriminator"]))
    for net in (model.generator, model.discriminator):
        net.params.load_state_dict(tensors)
    hyper = GanHyper(**cfg["hyper"]) if cfg.get("hyper") else None
    if sidecar.get("rng_state") is None:
        return model, None, hyper
    rng = np.random.default_rng()
    rng.bit_generator.state = sidecar["rng_state"]
    states = {}
    for tag, key, net in (("adam_g", "g", model.generator), ("adam_d", "d", model.discriminator)):
        h = dict(sidecar["adam"][key])
        t = h.pop("t")
        opt = AdamState(**h, t=t)
        for name in net.params.names():
            if f"{tag}/m/{name}" in tensors:
                opt.m[name] = tensors[f"{tag}/m/{name}"].copy()
                opt.v[name] = tensors[f"{tag}/v/{name}"].copy()
        states[tag] = opt
    history = {k: [] for k in HISTORY_KEYS}
    with open(path.parent / sidecar["loss_history_path"], newline="") as fh:
        for row in csv.DictReader(fh):
            for k in HISTORY_KEYS:
                history[k].append(float(row[k]))
    perm = sidecar.get("perm")
    state = GanTrainState(seed=sidecar["seed"], rng=rng, adam_g=states["adam_g"], adam_d=states["adam_d"],
                          epoch=sidecar["epoch"], batch_in_epoch=sidecar["batch_in_epoch"],
                          batches=sidecar["batches"], perm=None if perm is None else np.asarray(perm),
                          audits=sidecar.get("audits", 0), history=history)
    return model, state, hyper
