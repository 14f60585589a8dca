"""Macro dev score against the sampling temperature for dense and skill models.

    python scripts/alpha_sweep.py --alphas 0.2 0.4 0.6 0.8 1.0 --steps 5000

Writes ``alpha_sweep.json`` and ``alpha_sweep.png``; the plot is rebuilt from
the JSON alone, so it can be regenerated without retraining.
"""

import argparse
import logging

from skillnetx.analysis import run_alpha_sweep
from skillnetx.config import desk_config, load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--alphas", type=float, nargs="+")
    ap.add_argument("--variants", nargs="+")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/alpha_sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = load_config(args.config) if args.config else desk_config()
    if args.steps:
        exp = exp.with_train(max_steps=args.steps)
    report = run_alpha_sweep(exp, args.alphas, args.variants, seed=args.seed, out_dir=args.out)
    for row in report["rows"]:
        print(f"{row['variant']:<16} alpha={row['alpha']:.1f}  macro={row['macro']:.2f}")


if __name__ == "__main__":
    main()
