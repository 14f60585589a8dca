"""Train every variant on the desk benchmark over several seeds and tabulate dev scores.

    python scripts/desk_benchmark.py --seeds 0 1 2 --out runs/desk

Writes one metrics log and checkpoint per (variant, seed), plus ``table.json``
and a Markdown table with per-task means and the macro average.
"""

import argparse
import logging
from pathlib import Path

from skillnetx.analysis import report_header, train_run, variant_table, write_json
from skillnetx.checkpoint import save_checkpoint
from skillnetx.config import desk_config, load_config


def markdown(table: dict) -> str:
    variants = list(table)
    tasks = list(table[variants[0]]["tasks"])
    lines = ["| variant | " + " | ".join(tasks) + " | macro |", "|---" * (len(tasks) + 2) + "|"]
    for v in variants:
        row = table[v]
        cells = " | ".join(f"{row['tasks'][t]:.1f}" for t in tasks)
        lines.append(f"| {v} | {cells} | {row['macro_mean']:.2f} ± {row['macro_std']:.2f} |")
    return "\n".join(lines)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--variants", nargs="+", default=["dense", "skill-ffn", "skill-ffn-mha"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = load_config(args.config) if args.config else desk_config()
    if args.steps:
        exp = exp.with_train(max_steps=args.steps)
    out = Path(args.out)
    data = exp.datasets()
    results = []
    for variant in args.variants:
        cell = exp.with_variant(variant)
        for seed in args.seeds:
            run_dir = out / f"{variant}_seed{seed}"
            res = train_run(cell, seed, data, log_path=run_dir / "metrics.jsonl")
            save_checkpoint(run_dir / "checkpoint", res.cfg, res.store, list(res.matrix.tasks),
                            extra={"stage": "train", "seed": seed})
            logging.info("%s seed %d macro %.2f", variant, seed, res.macro)
            results.append(res)
    table = variant_table(results)
    write_json(report_header(exp, table=table), out / "table.json")
    (out / "table.md").write_text(markdown(table) + "\n")
    print(markdown(table))


if __name__ == "__main__":
    main()
