"""Dev-set evaluation.  Scores are reported in points (0-100)."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import TaskDataset
from .metrics import accuracy, entity_f1, span_scores
from .model import ModelConfig, ParameterStore, predict
from .skills import SkillMask, TaskSpec, TaskType

PRIMARY_METRIC = {
    TaskType.CLASSIFICATION: "accuracy",
    TaskType.PAIR_CLASSIFICATION: "accuracy",
    TaskType.NSP: "accuracy",
    TaskType.MLM: "accuracy",
    TaskType.TOKEN_CLASSIFICATION: "f1",
    TaskType.SPAN_EXTRACTION: "f1",
}


def evaluate(
    store: ParameterStore,
    cfg: ModelConfig,
    dataset: TaskDataset,
    spec: TaskSpec,
    split: str = "dev",
    mask: Optional[SkillMask] = None,
    batch_size: int = 64,
    limit: Optional[int] = None,
    features: Optional[dict] = None,
) -> dict:
    """Primary score under ``score`` plus the metric-specific extras."""
    if dataset.task_id != spec.task_id or dataset.task_type is not spec.task_type:
        raise ValueError(f"dataset {dataset.task_id!r} does not match spec {spec.task_id!r}")
    feats = features if features is not None else dataset.features(split, cfg.max_len)
    n = feats["token_ids"].shape[0] if limit is None else min(limit, feats["token_ids"].shape[0])
    preds = []
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        preds.append(predict(store, cfg, dataset.batch(split, idx, cfg.max_len, feats), spec, mask))
    pred = np.concatenate(preds) if preds else np.zeros((0,), dtype=np.int64)
    gold = feats["labels"][:n]
    tt = spec.task_type
    out = {"task_id": spec.task_id, "metric": PRIMARY_METRIC[tt], "n": int(n)}
    if tt is TaskType.TOKEN_CLASSIFICATION:
        attn = feats["attention_mask"][:n]
        pred_tags = [p[(g >= 0) & (a > 0)] for p, g, a in zip(pred, gold, attn)]
        gold_tags = [g[(g >= 0) & (a > 0)] for g, a in zip(gold, attn)]
        scores = entity_f1(pred_tags, gold_tags)
        out.update({k: 100.0 * v for k, v in scores.items()})
        out["score"] = out["f1"]
    elif tt is TaskType.SPAN_EXTRACTION:
        scores = span_scores([tuple(p) for p in pred], [tuple(g) for g in gold])
        out.update({k: 100.0 * v for k, v in scores.items()})
        out["score"] = out["f1"]
    else:
        out["accuracy"] = 100.0 * accuracy(pred, gold)
        out["score"] = out["accuracy"]
    return out
