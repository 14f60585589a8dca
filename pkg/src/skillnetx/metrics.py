"""Task metrics: accuracy, entity-level F1 over BIO tags, and span overlap F1."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def accuracy(pred: Sequence[int], gold: Sequence[int]) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"prediction shape {pred.shape} vs gold {gold.shape}")
    return float((pred == gold).mean()) if gold.size else 0.0


def bio_entities(tags: Sequence[int]) -> set:
    """``{(start, end, type)}`` with inclusive ends from integer BIO tags.

    Tag 0 is O; tag ``1 + 2k`` is B of type k and ``2 + 2k`` is I of type k.  An I
    that does not continue an entity of its type starts a new one (conlleval).
    """
    out = set()
    start, etype = None, None
    for i, t in enumerate(list(tags) + [0]):
        t = int(t)
        if t > 0 and t % 2 == 0 and etype == (t - 2) // 2:
            continue
        if start is not None:
            out.add((start, i - 1, etype))
            start, etype = None, None
        if t > 0:
            start, etype = i, (t - 1) // 2
    return out


def prf(pred: set, gold: set) -> tuple[float, float, float]:
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def entity_f1(pred_tags: Iterable[Sequence[int]], gold_tags: Iterable[Sequence[int]]) -> dict:
    """Micro-averaged entity precision/recall/F1 over sentences."""
    pred_all, gold_all = set(), set()
    for i, (p, g) in enumerate(zip(pred_tags, gold_tags)):
        pred_all |= {(i,) + e for e in bio_entities(p)}
        gold_all |= {(i,) + e for e in bio_entities(g)}
    p, r, f = prf(pred_all, gold_all)
    return {"precision": p, "recall": r, "f1": f}


def span_f1_single(pred: tuple, gold: tuple) -> float:
    """Token-overlap F1 between inclusive spans ``(start, end)``."""
    ps, pe = int(pred[0]), int(pred[1])
    gs, ge = int(gold[0]), int(gold[1])
    if pe < ps or ge < gs:
        return 0.0
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return 2 * precision * recall / (precision + recall)


def span_scores(pred: Sequence[tuple], gold: Sequence[tuple]) -> dict:
    f1 = [span_f1_single(p, g) for p, g in zip(pred, gold)]
    em = [float(tuple(map(int, p)) == tuple(map(int, g))) for p, g in zip(pred, gold)]
    return {"f1": float(np.mean(f1)) if f1 else 0.0, "exact_match": float(np.mean(em)) if em else 0.0}


def macro_average(scores: Iterable[float]) -> float:
    scores = list(scores)
    if not scores:
        raise ValueError("macro average of no scores")
    return float(sum(scores) / len(scores))
