"""Adapt multitask checkpoints to the held-out tasks and compare with training from init.

    python scripts/new_task_study.py runs/desk/skill-ffn-mha_seed0/checkpoint \
        --baseline runs/desk/dense_seed0/checkpoint

For each held-out task: dev score at every step budget on the full data, the
score after the epoch budget at each training-set size, and the first budget
at which each starting point reaches the threshold.
"""

import argparse

from skillnetx.analysis import run_new_task_suite
from skillnetx.checkpoint import load_checkpoint
from skillnetx.config import desk_config, load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--baseline", nargs="*", default=[])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/new_tasks")
    args = ap.parse_args()

    exp = load_config(args.config) if args.config else desk_config()
    trained = {}
    for path in [args.checkpoint] + args.baseline:
        ck = load_checkpoint(path)
        trained[ck.cfg.variant.value] = (ck.store, ck.cfg)
    report = run_new_task_suite(exp, trained, seed=args.seed, out_dir=args.out)
    for task, res in report["tasks"].items():
        reach = ", ".join(f"{k}: {v}" for k, v in res["steps_to_threshold"].items())
        print(f"{task}: steps to {res['threshold']:g} -> {reach}")


if __name__ == "__main__":
    main()
