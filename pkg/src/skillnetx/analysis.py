"""Experiment drivers: multitask runs, skill perturbation, alpha sweep, new tasks.

Every report is a plain dict carrying the config hash and package version so
numbers can be traced back to the configuration that produced them.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import TaskDataset
from .evaluate import evaluate
from .metrics import macro_average
from .model import ModelConfig, ParameterStore, Variant, add_head, build_model
from .skills import (
    AllTaskSkills,
    Identity,
    LanguageSwap,
    RandomTaskSkills,
    SkillMatrix,
    TaskSpec,
    build_skill_matrix,
    perturbed_mask,
)
from .trainer import (
    MultitaskTrainer,
    TrainHyper,
    eval_curve,
    final_scores,
    skill_pretrain,
    steps_to_threshold,
)

logger = logging.getLogger(__name__)


def report_header(exp: ExperimentConfig, **extra) -> dict:
    return {"config_hash": exp.config_hash(), "code_version": __version__, **extra}


def write_json(obj, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------- multitask runs


@dataclass
class RunResult:
    variant: str
    seed: int
    store: ParameterStore
    cfg: ModelConfig
    matrix: SkillMatrix
    metrics: list

    @property
    def scores(self) -> dict:
        return final_scores(self.metrics)

    @property
    def macro(self) -> float:
        return macro_average(self.scores.values())


def pretrained_store(exp: ExperimentConfig, seed: int, matrix: SkillMatrix) -> ParameterStore:
    """Fresh model, optionally with skills pre-trained on the synthetic corpora."""
    store = build_model(exp.model, matrix, seed)
    pt = exp.pretrain
    if pt.steps > 0:
        hyper = TrainHyper(lr=pt.lr, batch_size=pt.batch_size, max_steps=pt.steps, seed=seed, eval_every=0)
        skill_pretrain(store, exp.model, exp.corpora(), hyper, pt.languages)
    return store


def train_run(
    exp: ExperimentConfig,
    seed: int,
    datasets: Optional[dict] = None,
    log_path: Optional[Union[str, Path]] = None,
    store: Optional[ParameterStore] = None,
) -> RunResult:
    """One multitask run of ``exp.model.variant`` with ``exp.train`` settings."""
    exp.validate()
    matrix = exp.skill_matrix()
    datasets = exp.datasets() if datasets is None else datasets
    store = pretrained_store(exp, seed, matrix) if store is None else store
    hyper = dataclasses.replace(exp.train, seed=seed)
    trainer = MultitaskTrainer(store, exp.model, matrix, datasets, hyper, log_path=log_path)
    trainer.run()
    return RunResult(exp.model.variant.value, seed, store, exp.model, matrix, trainer.state.metrics)


def variant_table(results: Sequence[RunResult]) -> dict:
    """Per-variant mean/std of each task score and of the macro average across seeds."""
    by_variant: dict[str, list[RunResult]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r)
    table = {}
    for variant, runs in by_variant.items():
        tasks = list(runs[0].scores)
        table[variant] = {
            "seeds": [r.seed for r in runs],
            "tasks": {t: float(np.mean([r.scores[t] for r in runs])) for t in tasks},
            "macro": [r.macro for r in runs],
            "macro_mean": float(np.mean([r.macro for r in runs])),
            "macro_std": float(np.std([r.macro for r in runs])),
        }
    return table


# ----------------------------------------------------------------- perturbation


def default_perturbations(matrix: SkillMatrix, language: str, seeds=(42, 624, 123)) -> list:
    others = [lang for lang in matrix.taxonomy.languages if lang != language]
    return (
        [Identity()]
        + [LanguageSwap(lang) for lang in others]
        + [AllTaskSkills()]
        + [RandomTaskSkills(s) for s in seeds]
    )


def run_perturbation_suite(
    store: ParameterStore,
    cfg: ModelConfig,
    matrix: SkillMatrix,
    datasets: dict,
    tasks: Optional[Sequence[str]] = None,
    perturbations: Optional[Sequence] = None,
    language: str = "en",
    eval_limit: Optional[int] = None,
) -> dict:
    """Evaluate each task under each inference-time mask perturbation.

    ``tasks`` defaults to every task in ``language``; ``perturbations`` defaults to
    identity, a swap to every other language, all task skills, and three random
    task-skill draws.  Rows report per-task scores, their macro average and the
    change versus the identity row.
    """
    tasks = list(tasks) if tasks is not None else [s.task_id for s in matrix.tasks if s.language == language]
    if not tasks:
        raise ValueError(f"no tasks to perturb for language {language!r}")
    perturbations = list(perturbations) if perturbations is not None else default_perturbations(matrix, language)
    features = {t: datasets[t].features("dev", cfg.max_len) for t in tasks}
    rows = []
    sampled_masks = {}
    for pert in perturbations:
        scores, masks = {}, {}
        for t in tasks:
            mask = perturbed_mask(matrix, t, pert)
            masks[t] = mask.describe()
            res = evaluate(store, cfg, datasets[t], matrix.spec(t), "dev", mask, limit=eval_limit, features=features[t])
            scores[t] = res["score"]
        rows.append({"perturbation": str(pert), "scores": scores, "macro": macro_average(scores.values())})
        if isinstance(pert, RandomTaskSkills):
            sampled_masks[str(pert)] = masks
    base = next((r["macro"] for r in rows if r["perturbation"] == str(Identity())), None)
    if base is None:
        base = macro_average(
            evaluate(store, cfg, datasets[t], matrix.spec(t), "dev", limit=eval_limit, features=features[t])["score"]
            for t in tasks
        )
    for r in rows:
        r["delta"] = r["macro"] - base
    original = {t: perturbed_mask(matrix, t, Identity()).describe() for t in tasks}
    return {"tasks": tasks, "baseline_macro": base, "rows": rows, "original_masks": original, "sampled_masks": sampled_masks}


def format_perturbation_table(report: dict) -> str:
    tasks = report["tasks"]
    w = max(len(r["perturbation"]) for r in report["rows"]) + 2
    head = f"{'perturbation':<{w}}" + "".join(f"{t:>10}" for t in tasks) + f"{'avg':>8}{'delta':>8}"
    lines = [head, "-" * len(head)]
    for r in report["rows"]:
        cells = "".join(f"{r['scores'][t]:>10.1f}" for t in tasks)
        lines.append(f"{r['perturbation']:<{w}}{cells}{r['macro']:>8.1f}{r['delta']:>8.1f}")
    sampled = report["sampled_masks"]
    if sampled:
        columns = {"task": {t: t for t in tasks}, "original": report["original_masks"], **sampled}
        widths = {k: max(len(k), *(len(col[t]) for t in tasks)) + 2 for k, col in columns.items()}
        lines.append("")
        lines.append("".join(f"{k:<{widths[k]}}" for k in columns).rstrip())
        for t in tasks:
            lines.append("".join(f"{col[t]:<{widths[k]}}" for k, col in columns.items()).rstrip())
    return "\n".join(lines)


# ----------------------------------------------------------------- alpha sweep


def run_alpha_sweep(
    exp: ExperimentConfig,
    alphas: Optional[Sequence[float]] = None,
    variants: Optional[Sequence[str]] = None,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
) -> dict:
    """Train one model per (variant, alpha); rows hold the final dev macro average."""
    alphas = list(exp.sweep.alphas if alphas is None else alphas)
    variants = list(exp.sweep.variants if variants is None else variants)
    if not alphas:
        raise ValueError("alpha sweep needs at least one alpha")
    datasets = exp.datasets()
    rows = []
    for variant in variants:
        for alpha in alphas:
            cell = exp.with_variant(variant).with_train(alpha=float(alpha))
            if exp.sweep.steps:
                cell = cell.with_train(max_steps=exp.sweep.steps)
            log = Path(out_dir) / f"sweep_{Variant(variant).value}_alpha{alpha}.jsonl" if out_dir else None
            result = train_run(cell, seed, datasets, log_path=log)
            rows.append({"variant": Variant(variant).value, "alpha": float(alpha), "macro": result.macro,
                         "scores": result.scores})
            logger.info("sweep %s alpha=%s macro=%.2f", variant, alpha, result.macro)
    report = report_header(exp, seed=seed, rows=rows)
    if out_dir is not None:
        write_json(report, Path(out_dir) / "alpha_sweep.json")
        plot_alpha_sweep(Path(out_dir) / "alpha_sweep.json", Path(out_dir) / "alpha_sweep.png")
    return report


def plot_alpha_sweep(report_path: Union[str, Path], out_path: Union[str, Path]) -> Path:
    """Line plot of macro average against alpha, built only from the saved report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = json.loads(Path(report_path).read_text())
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for variant in dict.fromkeys(r["variant"] for r in report["rows"]):
        pts = sorted((r["alpha"], r["macro"]) for r in report["rows"] if r["variant"] == variant)
        ax.plot([a for a, _ in pts], [m for _, m in pts], marker="o", label=variant)
    ax.set_xlabel("sampling temperature alpha")
    ax.set_ylabel("dev macro average")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    # fixed metadata keeps the file byte-identical across regenerations
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out_path


# ----------------------------------------------------------------- new tasks


def finetune_curve(
    store: ParameterStore,
    cfg: ModelConfig,
    spec: TaskSpec,
    dataset: TaskDataset,
    steps: int,
    eval_at: Sequence[int],
    lr: float,
    batch_size: int,
    seed: int,
    eval_limit: Optional[int] = None,
) -> list[tuple[int, float]]:
    """Fine-tune every parameter on one task; return ``(step, dev score)`` at ``eval_at``."""
    add_head(store, cfg, spec, seed)
    matrix = build_skill_matrix([spec], cfg.taxonomy)
    hyper = TrainHyper(
        alpha=1.0, lr=lr, batch_size=batch_size, max_steps=steps, seed=seed,
        eval_every=0, eval_steps=tuple(eval_at), eval_limit=eval_limit,
    )
    trainer = MultitaskTrainer(store, cfg, matrix, {spec.task_id: dataset}, hyper)
    trainer.run()
    return [(s, v) for s, v in eval_curve(trainer.state.metrics, spec.task_id) if s in set(eval_at)]


def subsample(dataset: TaskDataset, size: Union[int, str], seed: int) -> TaskDataset:
    n = len(dataset)
    if size == "all" or int(size) >= n:
        return dataset
    idx = np.sort(np.random.default_rng(seed).choice(n, size=int(size), replace=False))
    splits = dict(dataset.splits)
    splits["train"] = [dataset.splits["train"][i] for i in idx]
    return dataclasses.replace(dataset, splits=splits)


def epoch_steps(n_examples: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_examples / batch_size)


def run_new_task_suite(
    exp: ExperimentConfig,
    trained: dict,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    eval_limit: Optional[int] = None,
) -> dict:
    """Compare starting points for each held-out task.

    ``trained`` maps a label (e.g. ``skill-ffn-mha``, ``dense``) to a
    ``(store, model config)`` pair from multitask training; a fresh model of the
    skill architecture (``from-init``) is added automatically.  For every task
    the report holds a step-budget curve on the full data and the score after
    the epoch budget at each training-set size.
    """
    ad = exp.adapt
    skill_cfg = exp.model
    starts = dict(trained)
    matrix = exp.skill_matrix()
    datasets = exp.datasets(exp.new_tasks)
    tasks = {}
    for spec in exp.new_task_specs():
        ds = datasets[spec.task_id]
        curves, sizes = {}, {}
        for label in list(starts) + ["from-init"]:
            def fresh():
                if label == "from-init":
                    return build_model(skill_cfg, matrix, seed), skill_cfg
                store, cfg = starts[label]
                return _clone(store), cfg

            store, cfg = fresh()
            budget = max(ad.step_grid)
            curves[label] = finetune_curve(
                store, cfg, spec, ds, budget, ad.step_grid, ad.lr, ad.batch_size, seed, eval_limit
            )
            sizes[label] = {}
            for size in ad.size_grid:
                sub = subsample(ds, size, seed)
                steps = epoch_steps(len(sub), ad.batch_size, ad.epochs)
                store, cfg = fresh()
                curve = finetune_curve(store, cfg, spec, sub, steps, [steps], ad.lr, ad.batch_size, seed, eval_limit)
                sizes[label][str(size)] = {
                    "n": len(sub), "steps": steps, "score": curve[-1][1],
                }
        reach = {label: steps_to_threshold(c, ad.threshold) for label, c in curves.items()}
        tasks[spec.task_id] = {
            "curves": {k: [list(p) for p in v] for k, v in curves.items()},
            "data_sizes": sizes,
            "steps_to_threshold": reach,
            "threshold": ad.threshold,
        }
    report = report_header(exp, seed=seed, tasks=tasks)
    if out_dir is not None:
        write_json(report, Path(out_dir) / "new_tasks.json")
        plot_new_task_curves(Path(out_dir) / "new_tasks.json", Path(out_dir))
    return report


def _clone(store: ParameterStore) -> ParameterStore:
    out = ParameterStore()
    for name, t in store.items():
        out.add(name, t.data.copy(), store.owners[name])
    return out


def plot_new_task_curves(report_path: Union[str, Path], out_dir: Union[str, Path]) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = json.loads(Path(report_path).read_text())
    paths = []
    for task_id, res in report["tasks"].items():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        for label, curve in res["curves"].items():
            ax1.plot([s for s, _ in curve], [v for _, v in curve], marker="o", label=label)
        ax1.axhline(res["threshold"], color="grey", lw=0.8, ls="--")
        ax1.set_xlabel("fine-tuning steps")
        ax1.set_ylabel(f"{task_id} dev score")
        ax1.legend()
        labels = list(res["data_sizes"])
        size_keys = list(res["data_sizes"][labels[0]])
        width = 0.8 / len(labels)
        for i, label in enumerate(labels):
            vals = [res["data_sizes"][label][k]["score"] for k in size_keys]
            ax2.bar(np.arange(len(size_keys)) + i * width, vals, width, label=label)
        ax2.set_xticks(np.arange(len(size_keys)) + 0.4 - width / 2)
        ax2.set_xticklabels(size_keys)
        ax2.set_xlabel("training examples")
        fig.tight_layout()
        path = Path(out_dir) / f"new_task_{task_id}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


__all__ = [
    "RunResult",
    "default_perturbations",
    "finetune_curve",
    "format_perturbation_table",
    "plot_alpha_sweep",
    "plot_new_task_curves",
    "run_alpha_sweep",
    "run_new_task_suite",
    "run_perturbation_suite",
    "train_run",
    "variant_table",
    "write_json",
]
