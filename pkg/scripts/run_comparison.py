"""Run the toy augmentation experiment over several master seeds.

    python3 scripts/run_comparison.py --out runs/comparison --seeds 0 1 2
"""

import argparse
import logging
from dataclasses import replace

from synthaug.experiment import ExperimentConfig, run_comparison


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="experiment config JSON (defaults are used when omitted)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/comparison")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, out=args.out)
    summary = run_comparison(cfg, args.seeds)
    for row in summary["per_seed"]:
        acc = row["accuracy"]
        print(f"seed {row['seed']}: actual {acc['actual']:.3f}  augmented {acc['augmented']:.3f}")
    mean = summary["mean_accuracy"]
    print(f"mean:   actual {mean['actual']:.3f}  augmented {mean['augmented']:.3f}")


if __name__ == "__main__":
    main()
