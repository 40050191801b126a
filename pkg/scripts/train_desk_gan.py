"""Train the 28px GAN on the toy corpus and score label fidelity.

Fidelity is the share of generated samples that a nearest-class-mean probe,
fitted on real images the GAN never saw, assigns to the requested class.

    python3 scripts/train_desk_gan.py --epochs 300 --out runs/desk_gan
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from synthaug.datapipe import ToyCorpusSpec, gen_toy_corpus, preprocess, write_png
from synthaug.gan import GanHyper, gan_preset, generate, save_checkpoint, to_uint8, train_gan


def class_means(seed: int, per_class: int = 100) -> np.ndarray:
    recs = gen_toy_corpus(ToyCorpusSpec(28, per_class, 0.2, seed))
    x = preprocess(recs, (28, 28), "symmetric").data.reshape(len(recs), -1)
    y = np.array([r.label_index for r in recs])
    return np.stack([x[y == k].mean(axis=0) for k in (0, 1)])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--per-class", type=int, default=50)
    ap.add_argument("--noise", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--out", default="runs/desk_gan")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    recs = gen_toy_corpus(ToyCorpusSpec(28, args.per_class, args.noise, args.seed))
    x = preprocess(recs, (28, 28), "symmetric")
    y = np.array([r.label_index for r in recs])
    model = gan_preset("desk", args.seed)
    hyper = GanHyper(epochs=args.epochs)
    _, state = train_gan(x, y, model, hyper, seed=args.seed, audit=True)
    save_checkpoint(model, state, out / "gan.cgw", hyper)

    labels = np.repeat([0, 1], args.samples // 2)
    fake = generate(model, len(labels), labels, seed=args.seed + 1).data
    means = class_means(seed=args.seed + 99)
    d = ((fake.reshape(len(fake), 1, -1) - means[None]) ** 2).sum(axis=-1)
    fidelity = float(np.mean(d.argmin(axis=1) == labels))

    # 2 rows x 8 columns of samples, one row per class
    picks = np.concatenate([np.flatnonzero(labels == k)[:8] for k in (0, 1)])
    tiles = to_uint8(fake[picks]).reshape(2, 8, 28, 28, 3)
    write_png(out / "samples.png", tiles.transpose(0, 2, 1, 3, 4).reshape(56, 224, 3))
    print(f"epochs {state.epoch}, steps {state.batches}, audits {state.audits}, fidelity {fidelity:.3f}")


if __name__ == "__main__":
    main()
