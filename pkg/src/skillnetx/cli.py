"""``skillnetx`` command line: pretrain, train, eval, perturb, adapt and sweeps.

Every command reads an experiment config (``--config``; the built-in desk config
when omitted), writes into ``--out`` and exits nonzero with a one-line
diagnostic when a contract is violated.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .analysis import (
    format_perturbation_table,
    report_header,
    run_alpha_sweep,
    run_new_task_suite,
    run_perturbation_suite,
    write_json,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, desk_config, dump_config, load_config
from .evaluate import evaluate
from .metrics import macro_average
from .model import Variant, add_head, build_model
from .skills import LanguageSwap, build_skill_matrix, perturbed_mask
from .tensor import ContractError, ShapeError
from .trainer import MultitaskTrainer, TrainHyper, final_scores, skill_pretrain, write_metrics

logger = logging.getLogger("skillnetx")


def _config(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else desk_config()
    if getattr(args, "variant", None):
        exp = exp.with_variant(args.variant)
    changes = {}
    if getattr(args, "alpha", None) is not None:
        changes["alpha"] = args.alpha
    if getattr(args, "steps", None) is not None:
        changes["max_steps"] = args.steps
    if changes:
        exp = exp.with_train(**changes)
    exp.validate()
    return exp


def _out(args, exp: ExperimentConfig) -> Path:
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_checkpoint(args):
    if not args.checkpoint:
        raise CheckpointError(f"'{args.command}' needs --checkpoint")
    return load_checkpoint(args.checkpoint)


# ----------------------------------------------------------------- commands


def cmd_pretrain(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    steps = args.steps if args.steps is not None else exp.pretrain.steps
    if steps <= 0:
        raise ConfigError("pretraining needs a positive step count (pretrain.steps or --steps)")
    matrix = exp.skill_matrix()
    store = build_model(exp.model, matrix, args.seed)
    hyper = TrainHyper(lr=exp.pretrain.lr, batch_size=exp.pretrain.batch_size, max_steps=steps, seed=args.seed, eval_every=0)
    _, state = skill_pretrain(store, exp.model, exp.corpora(), hyper, exp.pretrain.languages)
    write_metrics(state.metrics, out / "pretrain_metrics.jsonl")
    save_checkpoint(out / "checkpoint", exp.model, store, list(matrix.tasks), extra={"stage": "pretrain", "seed": args.seed})
    return report_header(exp, command="pretrain", seed=args.seed, steps=steps)


def cmd_train(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    matrix = exp.skill_matrix()
    hyper = dataclasses.replace(exp.train, seed=args.seed)
    state = None
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        if ck.cfg.to_dict() != exp.model.to_dict():
            raise CheckpointError("checkpoint model config differs from the experiment config")
        store, state = ck.store, ck.state
        if state is not None and ck.extra.get("train") != _hyper_dict(hyper):
            raise CheckpointError("checkpoint was written with different training settings")
    else:
        store = build_model(exp.model, matrix, args.seed)
    for spec in matrix.tasks:
        add_head(store, exp.model, spec, args.seed)
    trainer = MultitaskTrainer(store, exp.model, matrix, exp.datasets(), hyper, state=state)
    trainer.run(until=args.until)
    write_metrics(trainer.state.metrics, out / "metrics.jsonl")
    save_checkpoint(
        out / "checkpoint", exp.model, store, list(matrix.tasks), trainer.state,
        extra={"stage": "train", "seed": args.seed, "train": _hyper_dict(hyper)},
    )
    scores = final_scores(trainer.state.metrics)
    report = report_header(
        exp, command="train", variant=exp.model.variant.value, seed=args.seed, step=trainer.state.step,
        scores=scores, macro=macro_average(scores.values()) if scores else None,
    )
    write_json(report, out / "scores.json")
    return report


def _hyper_dict(hyper: TrainHyper) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(hyper)))


def cmd_eval(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    ck = _require_checkpoint(args)
    datasets = exp.datasets()
    matrix = build_skill_matrix([s for s in ck.specs if s.task_id in datasets], ck.cfg.taxonomy)
    rows = [evaluate(ck.store, ck.cfg, datasets[s.task_id], s, args.split) for s in matrix.tasks]
    report = report_header(
        exp, command="eval", split=args.split, results=rows, macro=macro_average(r["score"] for r in rows)
    )
    write_json(report, out / f"eval_{args.split}.json")
    return report


def cmd_perturb(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    ck = _require_checkpoint(args)
    datasets = exp.datasets()
    matrix = build_skill_matrix([s for s in ck.specs if s.task_id in datasets], ck.cfg.taxonomy)
    perts = None
    if args.swap_to:
        perts = [LanguageSwap(t) for t in args.swap_to]
        perturbed_mask(matrix, matrix.task_ids[0], perts[0])  # validates the target early
    suite = run_perturbation_suite(ck.store, ck.cfg, matrix, datasets, perturbations=perts, language=args.language)
    report = report_header(exp, command="perturb", language=args.language, **suite)
    write_json(report, out / "perturbation.json")
    (out / "perturbation.txt").write_text(format_perturbation_table(suite) + "\n")
    print(format_perturbation_table(suite))
    return report


def cmd_adapt(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    ck = _require_checkpoint(args)
    entries = {t.task_id: t for t in exp.new_tasks}
    if args.task not in entries:
        raise ConfigError(f"unknown new task {args.task!r}; config defines {sorted(entries)}")
    spec = entries[args.task].spec(ck.cfg.taxonomy)
    dataset = exp.datasets([entries[args.task]])[args.task]
    steps = args.steps if args.steps is not None else max(exp.adapt.step_grid)
    add_head(ck.store, ck.cfg, spec, args.seed)
    hyper = TrainHyper(
        alpha=1.0, lr=exp.adapt.lr, batch_size=exp.adapt.batch_size, max_steps=steps, seed=args.seed,
        eval_every=0, eval_steps=tuple(s for s in exp.adapt.step_grid if s <= steps),
    )
    trainer = MultitaskTrainer(ck.store, ck.cfg, build_skill_matrix([spec], ck.cfg.taxonomy), {spec.task_id: dataset}, hyper)
    trainer.run()
    write_metrics(trainer.state.metrics, out / f"adapt_{args.task}.jsonl")
    save_checkpoint(out / "checkpoint", ck.cfg, ck.store, ck.specs + [spec], extra={"stage": "adapt", "task": args.task})
    report = report_header(exp, command="adapt", task=args.task, seed=args.seed, scores=final_scores(trainer.state.metrics))
    write_json(report, out / f"adapt_{args.task}.json")
    return report


def cmd_sweep_alpha(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    return run_alpha_sweep(exp, args.alphas, args.variants, seed=args.seed, out_dir=out)


def cmd_sweep_newtask(args) -> dict:
    exp = _config(args)
    out = _out(args, exp)
    ck = _require_checkpoint(args)
    trained = {ck.cfg.variant.value: (ck.store, ck.cfg)}
    for path in args.baseline or []:
        other = load_checkpoint(path)
        trained[other.cfg.variant.value] = (other.store, other.cfg)
    return run_new_task_suite(exp, trained, seed=args.seed, out_dir=out)


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillnetx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML/JSON experiment config (default: built-in desk config)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--checkpoint", help="checkpoint directory to start from")
        return p

    p = common(sub.add_parser("pretrain", help="skill pre-training with MLM and NSP"))
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("train", help="multitask training"))
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--until", type=int, help="stop (and checkpoint) after this many steps")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--split", default="dev")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("perturb", help="skill perturbation at inference time"))
    p.add_argument("--language", default="en")
    p.add_argument("--swap-to", nargs="+", help="only run language swaps to these languages")
    p.set_defaults(func=cmd_perturb)

    p = common(sub.add_parser("adapt", help="fine-tune a trained model on a held-out task"))
    p.add_argument("--task", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_adapt)

    p = common(sub.add_parser("sweep-alpha", help="one run per sampling temperature and variant"))
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--variants", nargs="+", choices=[v.value for v in Variant])
    p.set_defaults(func=cmd_sweep_alpha)

    p = common(sub.add_parser("sweep-newtask", help="new-task curves over step budgets and data sizes"))
    p.add_argument("--baseline", nargs="+", help="extra multitask checkpoints to compare (e.g. dense)")
    p.set_defaults(func=cmd_sweep_newtask)

    p = sub.add_parser("dump-config", help="write the built-in desk config as YAML")
    p.add_argument("path")
    p.set_defaults(func=lambda a: dump_config(desk_config(), a.path) or {"written": a.path})
    return parser


CONTRACT_ERRORS = (ConfigError, CheckpointError, ContractError, ShapeError, ValueError, KeyError, FileNotFoundError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        result = args.func(args)
    except CONTRACT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"skillnetx {args.command}: error: {msg}", file=sys.stderr)
        return 2
    if args.command not in ("perturb",) and result is not None:
        summary = {k: v for k, v in result.items() if k in ("command", "config_hash", "step", "macro", "scores", "rows")}
        print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
