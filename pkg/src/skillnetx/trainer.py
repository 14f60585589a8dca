"""Multitask training: temperature sampling, class-count loss scaling, Adam.

Also skill pre-training (MLM + NSP with sparse activation) and adaptation of a
trained model to an unseen task by composing existing skills.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .data import TaskDataset, mlm_batch, nsp_batch
from .evaluate import evaluate
from .metrics import macro_average
from .model import Batch, ModelConfig, ParameterStore, add_head, default_mask, forward_task
from .skills import (
    MLM_SKILLS,
    NSP_SKILLS,
    SkillMask,
    SkillMatrix,
    TaskSpec,
    TaskType,
    build_skill_matrix,
    make_spec,
)
from .tensor import ContractError, GradTape, Tensor, backward, scale

logger = logging.getLogger(__name__)


def _seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


# ----------------------------------------------------------------- sampling


def sampling_probs(sizes: Sequence[int], alpha: float) -> list[float]:
    """``q_i = p_i**alpha / sum_j p_j**alpha`` with ``p_i = |T_i| / sum_k |T_k|``."""
    if len(sizes) == 0:
        raise ValueError("no dataset sizes")
    if any(s < 1 for s in sizes):
        raise ValueError(f"dataset sizes must be positive: {list(sizes)}")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    total = float(sum(sizes))
    p = np.array([s / total for s in sizes])
    w = p**alpha
    return list(w / w.sum())


@dataclass(frozen=True)
class SamplingPlan:
    alpha: float
    sizes: tuple
    probs: tuple

    @classmethod
    def from_sizes(cls, sizes: Sequence[int], alpha: float) -> "SamplingPlan":
        return cls(float(alpha), tuple(int(s) for s in sizes), tuple(sampling_probs(sizes, alpha)))


def sample_task(plan: SamplingPlan, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from the multinomial over tasks (one uniform per call)."""
    cdf = np.cumsum(plan.probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(plan.probs) - 1))


def scaled_loss(raw_loss: Union[Tensor, float], num_classes: int):
    """Divide a task loss by ``ln(num_classes)``."""
    if num_classes < 2:
        raise ContractError(f"loss scaling needs at least two classes, got {num_classes}")
    factor = 1.0 / math.log(num_classes)
    if isinstance(raw_loss, Tensor):
        return scale(raw_loss, factor)
    return raw_loss * factor


def linear_decay(base_lr: float, step: int, max_steps: int) -> float:
    return base_lr * max(0.0, 1.0 - step / max_steps)


# ----------------------------------------------------------------- state


@dataclass
class TrainHyper:
    alpha: float = 0.4
    lr: float = 1e-3
    batch_size: int = 16
    max_steps: int = 5000
    seed: int = 0
    eval_every: int = 1000  # 0 disables periodic evaluation
    eval_steps: tuple = ()  # extra evaluation points
    eval_limit: Optional[int] = None  # cap on dev examples per task
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("lr, batch_size and max_steps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.eval_steps = tuple(self.eval_steps)

    def should_eval(self, step: int) -> bool:
        return (self.eval_every > 0 and step % self.eval_every == 0) or step in self.eval_steps or (
            step == self.max_steps
        )


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    param_steps: dict = field(default_factory=dict)
    rng_state: Optional[dict] = None
    dropout_rng_state: Optional[dict] = None
    cursors: dict = field(default_factory=dict)  # task_id -> [epoch, position]
    metrics: list = field(default_factory=list)

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name in self.m:
            arrays[f"m/{name}"] = self.m[name]
            arrays[f"v/{name}"] = self.v[name]
        np.savez(directory / "train_state.npz", **arrays)
        meta = {
            "step": self.step,
            "param_steps": self.param_steps,
            "rng_state": self.rng_state,
            "dropout_rng_state": self.dropout_rng_state,
            "cursors": self.cursors,
            "metrics": self.metrics,
        }
        (directory / "train_state.json").write_text(json.dumps(meta, indent=1, default=_json_default))

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "TrainState":
        directory = Path(directory)
        meta = json.loads((directory / "train_state.json").read_text())
        state = cls(
            step=meta["step"],
            param_steps={k: int(v) for k, v in meta["param_steps"].items()},
            rng_state=meta["rng_state"],
            dropout_rng_state=meta["dropout_rng_state"],
            cursors={k: list(v) for k, v in meta["cursors"].items()},
            metrics=meta["metrics"],
        )
        with np.load(directory / "train_state.npz") as z:
            for key in z.files:
                kind, name = key.split("/", 1)
                getattr(state, kind)[name] = np.array(z[key])
        return state


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def adam_update(store: ParameterStore, state: TrainState, lr: float, hyper: TrainHyper) -> list[str]:
    """Adam step on every parameter that received a gradient; others are untouched."""
    b1, b2, eps = hyper.beta1, hyper.beta2, hyper.adam_eps
    updated = []
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        t = state.param_steps.get(name, 0) + 1
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name], state.param_steps[name] = m, v, t
        p.data = p.data - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        updated.append(name)
    return updated


def train_step(
    store: ParameterStore,
    cfg: ModelConfig,
    state: TrainState,
    batch: Batch,
    spec: TaskSpec,
    mask: Optional[SkillMask],
    hyper: TrainHyper,
    dropout_rng: Optional[np.random.Generator] = None,
) -> dict:
    """forward -> scaled loss -> backward -> Adam (linear-decay LR) -> zero grads."""
    lr = linear_decay(hyper.lr, state.step, hyper.max_steps)
    num_classes = cfg.vocab_size if spec.task_type is TaskType.MLM else spec.num_classes
    with GradTape() as tape:
        _, raw = forward_task(store, cfg, batch, spec, mask, dropout_rng)
        loss = scaled_loss(raw, num_classes)
        backward(loss, tape)
    adam_update(store, state, lr, hyper)
    store.zero_grads()
    state.step += 1
    record = {
        "kind": "train",
        "step": state.step,
        "task_id": spec.task_id,
        "raw_loss": raw.item(),
        "scaled_loss": loss.item(),
        "lr": lr,
    }
    state.metrics.append(record)
    return record


# ----------------------------------------------------------------- multitask loop


class MultitaskTrainer:
    """Sample a task, draw its next mini-batch, take one step; evaluate periodically.

    Each task's training set is cycled in epochs, reshuffled per epoch with a
    seed derived from ``(seed, task_id, epoch)``, so the loop is resumable from
    ``TrainState`` alone.
    """

    def __init__(
        self,
        store: ParameterStore,
        cfg: ModelConfig,
        matrix: SkillMatrix,
        datasets: dict,
        hyper: TrainHyper,
        state: Optional[TrainState] = None,
        log_path: Optional[Union[str, Path]] = None,
        masks: Optional[dict] = None,
    ):
        missing = [t for t in matrix.task_ids if t not in datasets]
        if missing:
            raise ValueError(f"no dataset for tasks {missing}")
        self.store, self.cfg, self.matrix, self.hyper = store, cfg, matrix, hyper
        self.datasets = datasets
        self.specs = list(matrix.tasks)
        self.masks = masks or {s.task_id: default_mask(s, cfg) for s in self.specs}
        self.plan = SamplingPlan.from_sizes([len(datasets[s.task_id]) for s in self.specs], hyper.alpha)
        self.state = state if state is not None else TrainState()
        self.rng = np.random.default_rng(_seed(hyper.seed, "task-sampling"))
        if self.state.rng_state is not None:
            self.rng.bit_generator.state = self.state.rng_state
        self.dropout_rng = None
        if cfg.dropout > 0:
            self.dropout_rng = np.random.default_rng(_seed(hyper.seed, "dropout"))
            if self.state.dropout_rng_state is not None:
                self.dropout_rng.bit_generator.state = self.state.dropout_rng_state
        self._train = {t: datasets[t].features("train", cfg.max_len) for t in matrix.task_ids}
        self._dev = {}
        self.log_path = Path(log_path) if log_path else None

    def _order(self, task_id: str, epoch: int) -> np.ndarray:
        n = len(self.datasets[task_id])
        return np.random.default_rng(_seed(self.hyper.seed, task_id, epoch)).permutation(n)

    def next_batch(self, task_id: str) -> Batch:
        epoch, pos = self.state.cursors.get(task_id, [0, 0])
        n = len(self.datasets[task_id])
        idx = []
        while len(idx) < self.hyper.batch_size:
            order = self._order(task_id, epoch)
            take = min(self.hyper.batch_size - len(idx), n - pos)
            idx.extend(order[pos : pos + take].tolist())
            pos += take
            if pos >= n:
                epoch, pos = epoch + 1, 0
        self.state.cursors[task_id] = [epoch, pos]
        return self.datasets[task_id].batch("train", idx, self.cfg.max_len, self._train[task_id])

    def step(self) -> dict:
        k = sample_task(self.plan, self.rng)
        spec = self.specs[k]
        batch = self.next_batch(spec.task_id)
        record = train_step(
            self.store, self.cfg, self.state, batch, spec, self.masks[spec.task_id], self.hyper, self.dropout_rng
        )
        self.state.rng_state = self.rng.bit_generator.state
        if self.dropout_rng is not None:
            self.state.dropout_rng_state = self.dropout_rng.bit_generator.state
        return record

    def evaluate_all(self, split: str = "dev") -> list[dict]:
        records = []
        for spec in self.specs:
            key = (spec.task_id, split)
            if key not in self._dev:
                self._dev[key] = self.datasets[spec.task_id].features(split, self.cfg.max_len)
            res = evaluate(
                self.store, self.cfg, self.datasets[spec.task_id], spec, split,
                self.masks[spec.task_id], limit=self.hyper.eval_limit, features=self._dev[key],
            )
            rec = {"kind": "eval", "step": self.state.step, "split": split}
            rec.update(res)
            records.append(rec)
        self.state.metrics.extend(records)
        return records

    def run(self, until: Optional[int] = None, callback: Optional[Callable] = None) -> TrainState:
        until = self.hyper.max_steps if until is None else min(until, self.hyper.max_steps)
        while self.state.step < until:
            self.step()
            if self.hyper.should_eval(self.state.step):
                self.evaluate_all()
            if callback is not None:
                callback(self)
        if self.log_path is not None:
            write_metrics(self.state.metrics, self.log_path)
        return self.state


def write_metrics(records: list, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")


def read_metrics(path: Union[str, Path]) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def final_scores(metrics: list, step: Optional[int] = None) -> dict:
    """``{task_id: score}`` from the last (or given-step) evaluation round."""
    evals = [r for r in metrics if r.get("kind") == "eval" and r.get("split", "dev") == "dev"]
    if not evals:
        return {}
    at = max(r["step"] for r in evals) if step is None else step
    return {r["task_id"]: r["score"] for r in evals if r["step"] == at}


def multitask_train(
    store: ParameterStore,
    cfg: ModelConfig,
    matrix: SkillMatrix,
    datasets: dict,
    hyper: TrainHyper,
    log_path: Optional[Union[str, Path]] = None,
) -> tuple[ParameterStore, list]:
    trainer = MultitaskTrainer(store, cfg, matrix, datasets, hyper, log_path=log_path)
    trainer.run()
    return store, trainer.state.metrics


def macro_dev_score(metrics: list) -> float:
    return macro_average(final_scores(metrics).values())


# ----------------------------------------------------------------- skill pre-training


def pretrain_specs(cfg: ModelConfig, languages: Sequence[str]) -> list[TaskSpec]:
    specs = []
    tax = cfg.taxonomy
    for lang in languages:
        specs.append(make_spec(f"mlm-{lang}", TaskType.MLM, lang, cfg.vocab_size, MLM_SKILLS, tax))
        specs.append(make_spec(f"nsp-{lang}", TaskType.NSP, lang, 2, NSP_SKILLS, tax))
    return specs


def skill_pretrain(
    store: ParameterStore,
    cfg: ModelConfig,
    corpora: dict,
    hyper: TrainHyper,
    languages: Optional[Sequence[str]] = None,
) -> tuple[ParameterStore, TrainState]:
    """Alternate MLM and NSP batches, cycling over the languages with a corpus.

    MLM activates {t_s1, t_s2} and NSP {t_s1, t_s3, t_s4}, each together with the
    corpus language's skill.  ``languages`` defaults to the corpora's keys; a
    listed language without a corpus is an error.
    """
    languages = list(corpora) if languages is None else list(languages)
    missing = [lang for lang in languages if lang not in corpora]
    if missing:
        raise ValueError(f"no pre-training corpus for languages {missing}")
    for lang in languages:
        cfg.taxonomy.language_skill(lang)
    specs = pretrain_specs(cfg, languages)
    matrix = build_skill_matrix(specs, cfg.taxonomy)
    for spec in specs:
        add_head(store, cfg, spec, hyper.seed)
    state = TrainState()
    for step in range(hyper.max_steps):
        lang = languages[(step // 2) % len(languages)]
        rng = np.random.default_rng(_seed(hyper.seed, "pretrain", step))
        if step % 2 == 0:
            spec = matrix.spec(f"mlm-{lang}")
            batch = mlm_batch(spec.task_id, corpora[lang], rng, hyper.batch_size, cfg.max_len, cfg.vocab_size)
        else:
            spec = matrix.spec(f"nsp-{lang}")
            batch = nsp_batch(spec.task_id, corpora[lang], rng, hyper.batch_size, cfg.max_len)
        train_step(store, cfg, state, batch, spec, default_mask(spec, cfg), hyper)
    return store, state


# ----------------------------------------------------------------- new tasks


def adapt_new_task(
    store: ParameterStore,
    cfg: ModelConfig,
    new_spec: TaskSpec,
    dataset: TaskDataset,
    hyper: TrainHyper,
    log_path: Optional[Union[str, Path]] = None,
) -> tuple[ParameterStore, list]:
    """Fine-tune the whole model on one new task routed through existing skills."""
    for s in new_spec.skills:
        if s not in cfg.taxonomy:
            raise ValueError(f"new task {new_spec.task_id!r} references unknown skill {s}")
    add_head(store, cfg, new_spec, hyper.seed)
    matrix = build_skill_matrix([new_spec], cfg.taxonomy)
    trainer = MultitaskTrainer(store, cfg, matrix, {new_spec.task_id: dataset}, hyper, log_path=log_path)
    trainer.run()
    return store, trainer.state.metrics


def eval_curve(metrics: list, task_id: str) -> list[tuple[int, float]]:
    return [
        (r["step"], r["score"])
        for r in metrics
        if r.get("kind") == "eval" and r["task_id"] == task_id and r.get("split", "dev") == "dev"
    ]


def steps_to_threshold(curve: Sequence[tuple[int, float]], threshold: float) -> Optional[int]:
    for step, score in sorted(curve):
        if score >= threshold:
            return step
    return None
