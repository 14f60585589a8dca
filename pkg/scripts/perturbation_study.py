"""Inference-time skill perturbation on a trained checkpoint.

    python scripts/perturbation_study.py runs/desk/skill-ffn-mha_seed0/checkpoint --language en

Prints per-task dev scores under identity, language swaps, all task skills and
random task-skill draws, and writes ``perturbation.json`` next to the table.
"""

import argparse
from pathlib import Path

from skillnetx.analysis import format_perturbation_table, report_header, run_perturbation_suite, write_json
from skillnetx.checkpoint import load_checkpoint
from skillnetx.config import desk_config, load_config
from skillnetx.skills import build_skill_matrix


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--config")
    ap.add_argument("--language", default="en")
    ap.add_argument("--out", default="runs/perturbation")
    args = ap.parse_args()

    exp = load_config(args.config) if args.config else desk_config()
    ck = load_checkpoint(args.checkpoint)
    data = exp.datasets()
    matrix = build_skill_matrix([s for s in ck.specs if s.task_id in data], ck.cfg.taxonomy)
    suite = run_perturbation_suite(ck.store, ck.cfg, matrix, data, language=args.language)
    write_json(report_header(exp, checkpoint=args.checkpoint, **suite), Path(args.out) / "perturbation.json")
    print(format_perturbation_table(suite))


if __name__ == "__main__":
    main()
