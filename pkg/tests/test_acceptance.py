"""Acceptance suite: one check per criterion, summarized at the end of the run.

The desk-scale runs (criteria 6-8) train nine models and take roughly half an
hour on one CPU core; set ``SKILLNETX_SKIP_DESK=1`` to skip them.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from skillnetx.analysis import _clone, finetune_curve, run_perturbation_suite, train_run, variant_table
from skillnetx.checkpoint import load_checkpoint, save_checkpoint
from skillnetx.config import TABLE_SIZES_K, desk_config
from skillnetx.data import generate_corpus
from skillnetx.layers import FfnParams, SkillFfnBank, dense_ffn, skill_ffn
from skillnetx.model import SHARED, Variant, build_model, default_mask, forward_task, head_owner
from skillnetx.skills import AllTaskSkills, Identity, LanguageSwap, TaskType
from skillnetx.tensor import ContractError, GradTape, Tensor, backward, cross_entropy, parameter
from skillnetx.trainer import (
    MultitaskTrainer,
    SamplingPlan,
    TrainHyper,
    TrainState,
    sample_task,
    sampling_probs,
    scaled_loss,
    skill_pretrain,
    steps_to_threshold,
    train_step,
    write_metrics,
)

from . import test_layers
from .conftest import ACCEPTANCE
from .gradcheck import directional_errors
from .test_model import tiny, tiny_batch
from .test_trainer import GOLDEN, SIZES

ARTIFACTS = Path(os.environ.get("SKILLNETX_ARTIFACTS", Path(__file__).resolve().parent.parent / "runs" / "acceptance"))
SEEDS = (0, 1, 2)
VARIANTS = ("dense", "skill-ffn", "skill-ffn-mha")
SKILL_VARIANTS = ("skill-ffn", "skill-ffn-mha")
CLASSIFICATION_STYLE = (TaskType.CLASSIFICATION, TaskType.PAIR_CLASSIFICATION)
desk_only = pytest.mark.skipif(os.environ.get("SKILLNETX_SKIP_DESK") == "1", reason="desk runs disabled")


def record(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(passed), detail)
    assert passed, detail


# ---------------------------------------------------------------- 1. gradients


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    layer_checks = [
        test_layers.test_dense_ffn_gradient,
        test_layers.test_skill_ffn_gradient,
        test_layers.test_dense_mha_gradient,
        test_layers.test_skill_mha_gradient,
        test_layers.test_moe_gradient,
    ]
    for check in layer_checks:
        for seed in range(20):
            check(seed)  # elementwise central differences, asserts internally
    heads = ["pair", "cls", "tag", "span", "mlm", "nsp"]
    worst, n_checks = 0.0, 0
    for variant in Variant:
        for seed in range(20):
            # the skill model checks every head on every seed, other variants rotate
            tasks = heads if variant is Variant.SKILL_FFN_MHA else [heads[seed % len(heads)]]
            for task in tasks:
                cfg, matrix, store = tiny(variant, seed=seed)
                spec = matrix.spec(task)
                batch = tiny_batch(np.random.default_rng(seed), spec)
                mask = default_mask(spec, cfg)
                with GradTape() as tape:
                    backward(forward_task(store, cfg, batch, spec, mask)[1], tape)
                active = [p for p in store.params.values() if p.grad is not None]
                errs = directional_errors(
                    lambda: forward_task(store, cfg, batch, spec, mask)[1], active, np.random.default_rng(seed)
                )
                worst = max(worst, max(errs))
                n_checks += 1
    elapsed = time.perf_counter() - start
    record(
        "1",
        worst <= 1e-4 and elapsed < 120,
        f"5 layers x 20 seeds elementwise; {n_checks} full 1-layer model checks, "
        f"worst rel err {worst:.2e}; {elapsed:.0f}s",
    )


# ---------------------------------------------------------------- 2. isolation


def test_criterion_2_routing_isolation():
    start = time.perf_counter()
    exp = desk_config()
    data = exp.datasets()
    violations, steps = [], 0
    for variant in SKILL_VARIANTS:
        cfg = exp.with_variant(variant).model
        matrix = exp.skill_matrix()
        store = build_model(cfg, matrix, 0)
        state, hyper = TrainState(), TrainHyper(max_steps=100)
        for spec in matrix.tasks:
            allowed = {SHARED, head_owner(spec.task_id)} | {str(s) for s in spec.skills}
            before = store.snapshot()
            batch = data[spec.task_id].batch("train", range(8), cfg.max_len)
            train_step(store, cfg, state, batch, spec, default_mask(spec, cfg), hyper)
            steps += 1
            violations += [
                (variant, spec.task_id, n)
                for n, t in store.items()
                if store.owners[n] not in allowed and not np.array_equal(before[n], t.data)
            ]

    store = build_model(exp.model, exp.skill_matrix(), 0)
    init = store.snapshot()
    corpora = {tag: generate_corpus(exp.language(tag), 50, seed=0) for tag in ("en", "zh")}
    skill_pretrain(store, exp.model, corpora, TrainHyper(max_steps=20, batch_size=8))
    frozen = [n for owner in ("l_s3", "l_s4") for n in store.owned_by(owner)]
    moved = [n for n in frozen if not np.array_equal(init[n], store[n].data)]
    elapsed = time.perf_counter() - start
    record(
        "2",
        not violations and frozen and not moved and elapsed < 60,
        f"{steps} single steps, {len(violations)} inactive-skill changes; pre-training on en+zh left "
        f"{len(frozen) - len(moved)}/{len(frozen)} de/es language parameters at init; {elapsed:.0f}s",
    )


# ---------------------------------------------------------------- 3. sparse FFN oracle


def _numpy_ffn(x, p):
    return np.maximum(x @ p.w1.data + p.b1.data, 0.0) @ p.w2.data + p.b2.data


def test_criterion_3_skill_ffn_oracle():
    rng = np.random.default_rng(2024)
    worst, exact = 0.0, True
    for _ in range(100):
        n, d, h = int(rng.integers(2, 11)), int(rng.integers(2, 9)), int(rng.integers(2, 17))
        bank = SkillFfnBank([
            FfnParams(*(parameter(rng.normal(size=s)) for s in ((d, h), (h,), (h, d), (d,)))) for _ in range(n)
        ])
        mask = rng.random(n) < 0.5
        mask[rng.integers(n)] = True
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(1, 6)), d))
        everything = np.stack([_numpy_ffn(x, m) for m in bank.members])  # evaluate all n members
        brute = everything[mask].sum(axis=0) / mask.sum()
        worst = max(worst, float(np.max(np.abs(skill_ffn(Tensor(x), bank, mask).data - brute))))
        k = int(rng.integers(n))
        single = np.zeros(n, dtype=bool)
        single[k] = True
        exact &= np.array_equal(skill_ffn(Tensor(x), bank, single).data, dense_ffn(Tensor(x), bank.members[k]).data)
    record("3", worst <= 1e-12 and exact, f"100 cases, max |sparse - brute force| {worst:.1e}; single skill == dense: {exact}")


# ---------------------------------------------------------------- 4. sampling


def test_criterion_4_sampling_golden_and_empirical():
    gold_err, freq_err = 0.0, 0.0
    for alpha, expected in GOLDEN.items():
        gold_err = max(gold_err, float(np.max(np.abs(np.array(sampling_probs(SIZES, alpha)) - expected))))
        plan = SamplingPlan.from_sizes(SIZES, alpha)
        rng = np.random.default_rng(7)
        counts = Counter(sample_task(plan, rng) for _ in range(100_000))
        freq = np.array([counts[k] / 100_000 for k in range(len(SIZES))])
        freq_err = max(freq_err, float(np.max(np.abs(freq - plan.probs))))
    assert len(SIZES) == len(TABLE_SIZES_K)
    record("4", gold_err <= 1e-12 and freq_err <= 0.01, f"max |q - oracle| {gold_err:.1e}; max |freq - q| {freq_err:.4f}")


# ---------------------------------------------------------------- 5. loss scaling


def test_criterion_5_scaled_uniform_loss():
    worst = 0.0
    for c in range(2, 21):
        logits = Tensor(np.zeros((3, c)))
        raw = cross_entropy(logits, np.zeros(3, dtype=int))
        worst = max(worst, abs(scaled_loss(raw, c).item() - 1.0))
    try:
        scaled_loss(0.0, 1)
        rejected = False
    except ContractError:
        rejected = True
    record("5", worst <= 1e-12 and rejected, f"max |loss - 1| over C=2..20: {worst:.1e}; C=1 rejected: {rejected}")


# ---------------------------------------------------------------- desk runs (6-8)


@pytest.fixture(scope="session")
def desk_runs():
    exp = desk_config()
    data = exp.datasets()
    runs, times = {}, {}
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    for variant in VARIANTS:
        for seed in SEEDS:
            start = time.perf_counter()
            runs[variant, seed] = train_run(
                exp.with_variant(variant), seed, data, log_path=ARTIFACTS / f"metrics_{variant}_seed{seed}.jsonl"
            )
            times[variant, seed] = time.perf_counter() - start
    return exp, data, runs, times


@desk_only
def test_criterion_6_desk_multitask(desk_runs):
    exp, _, runs, times = desk_runs
    table = variant_table(list(runs.values()))
    types = {t.task_id: TaskType(t.type) for t in exp.tasks}
    cls_tasks = [t for t, tt in types.items() if tt in CLASSIFICATION_STYLE]
    shortfalls = []
    for variant in SKILL_VARIANTS:
        for seed in SEEDS:
            scores = runs[variant, seed].scores
            shortfalls += [f"{variant}/s{seed}/{t}={scores[t]:.1f}" for t in cls_tasks if scores[t] < 95.0]
    mha, dense = table["skill-ffn-mha"]["macro_mean"], table["dense"]["macro_mean"]
    slowest = max(times.values())
    summary = {
        "seeds": list(SEEDS),
        "table": table,
        "seconds": {f"{v}/seed{s}": t for (v, s), t in times.items()},
        "classification_shortfalls": shortfalls,
    }
    (ARTIFACTS / "criterion6.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    macros = ", ".join(f"{v} {table[v]['macro_mean']:.2f}±{table[v]['macro_std']:.2f}" for v in VARIANTS)
    record(
        "6",
        not shortfalls and mha >= dense and slowest < 1800,
        f"macro over seeds {list(SEEDS)}: {macros}; classification runs below 95: "
        f"{shortfalls or 'none'}; slowest run {slowest:.0f}s",
    )


@desk_only
def test_criterion_7_perturbation_direction(desk_runs):
    exp, data, runs, _ = desk_runs
    lines, ok = [], True
    reports = {}
    for seed in SEEDS:
        run = runs["skill-ffn-mha", seed]
        others = [lang for lang in exp.taxonomy.languages if lang != "en"]
        perts = [Identity()] + [LanguageSwap(lang) for lang in others] + [AllTaskSkills()]
        report = run_perturbation_suite(run.store, run.cfg, run.matrix, data, perturbations=perts, language="en")
        reports[seed] = report
        deltas = {r["perturbation"]: r["delta"] for r in report["rows"]}
        swaps = [deltas[str(LanguageSwap(lang))] for lang in others]
        all_tasks = deltas[str(AllTaskSkills())]
        ok &= deltas[str(Identity())] == 0.0 and max(swaps) <= -10.0 and all_tasks <= -5.0
        lines.append(f"s{seed}: swaps {' '.join(f'{d:+.1f}' for d in swaps)}, all-task {all_tasks:+.1f}, "
                     f"identity {deltas[str(Identity())]:+.1f}")
    (ARTIFACTS / "criterion7.json").write_text(json.dumps(reports, indent=1, sort_keys=True))
    record("7", ok, "; ".join(lines))


@desk_only
def test_criterion_8_new_task_adaptation(desk_runs):
    exp, _, runs, _ = desk_runs
    ad = exp.adapt
    new_data = exp.datasets(exp.new_tasks)
    results, ok, lines = {}, True, []
    for spec in exp.new_task_specs():
        for seed in SEEDS:
            trained = runs["skill-ffn-mha", seed]
            curves = {}
            for label in ("adapted", "from-init"):
                if label == "adapted":
                    store = _clone(trained.store)
                else:
                    store = build_model(exp.model, exp.skill_matrix(), seed)
                curves[label] = finetune_curve(
                    store, exp.model, spec, new_data[spec.task_id], max(ad.step_grid), ad.step_grid,
                    ad.lr, ad.batch_size, seed,
                )
            reach = {k: steps_to_threshold(c, ad.threshold) for k, c in curves.items()}
            faster = reach["adapted"] is not None and (reach["from-init"] is None or reach["adapted"] < reach["from-init"])
            ok &= faster
            results[f"{spec.task_id}/seed{seed}"] = {"curves": curves, "steps_to_threshold": reach}
            lines.append(f"{spec.task_id}/s{seed} {reach['adapted']} vs {reach['from-init']}")
    (ARTIFACTS / "criterion8.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    record("8", ok, f"steps to {ad.threshold:g} (adapted vs from init): " + ", ".join(lines))


# ---------------------------------------------------------------- 9. determinism


def test_criterion_9_determinism_and_resume(tmp_path):
    exp = desk_config(steps=300).with_train(eval_every=100)
    data = exp.datasets()
    matrix = exp.skill_matrix()

    def trainer(store=None, state=None):
        store = build_model(exp.model, matrix, 5) if store is None else store
        return MultitaskTrainer(store, exp.model, matrix, data, dataclasses.replace(exp.train, seed=5), state=state)

    logs = []
    for k in range(2):
        tr = trainer()
        tr.run()
        write_metrics(tr.state.metrics, tmp_path / f"run{k}.jsonl")
        logs.append((tmp_path / f"run{k}.jsonl").read_bytes())
    reproducible = logs[0] == logs[1]

    first = trainer()
    first.run(until=150)
    save_checkpoint(tmp_path / "ck", exp.model, first.store, list(matrix.tasks), first.state)
    ck = load_checkpoint(tmp_path / "ck")
    second = trainer(ck.store, ck.state)
    second.run()
    write_metrics(second.state.metrics, tmp_path / "resumed.jsonl")
    resumed_log = (tmp_path / "resumed.jsonl").read_bytes() == logs[0]
    params = all(np.array_equal(tr.store[n].data, second.store[n].data) for n in tr.store)
    record(
        "9",
        reproducible and resumed_log and params,
        f"repeat run log identical: {reproducible}; resumed at 150/300 log identical: {resumed_log}, "
        f"parameters identical: {params}",
    )
