"""Synthetic languages, corpora and task datasets with planted, learnable signal.

Every language owns a disjoint block of token ids.  Inside a block the first
``ROLE_SIZES`` ids carry fixed roles (markers, entity heads, entity tails, answer
content); the remainder is filler.  Generators are pure functions of their
arguments and seeds.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .model import CLS_ID, IGNORE, MASK_ID, NUM_SPECIAL, PAD_ID, SEP_ID, Batch
from .skills import TaskType

SPECIAL_WORDS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")

NUM_MARKERS = 16
NUM_ENTITY_TYPES = 3
HEADS_PER_TYPE = 3
TAILS_PER_TYPE = 3
NUM_ANSWER_TYPES = 4
CONTENT_PER_TYPE = 4
NUM_CONTENT = NUM_ANSWER_TYPES * CONTENT_PER_TYPE
ROLE_SIZE = NUM_MARKERS + NUM_ENTITY_TYPES * (HEADS_PER_TYPE + TAILS_PER_TYPE) + NUM_CONTENT
ENTITY_TYPES = ("PER", "LOC", "ORG")


def _seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


@dataclass(frozen=True)
class LanguageSpec:
    tag: str
    start: int
    size: int = 120
    zipf: float = 1.0
    tier: int = 8  # tokens per frequency tier
    min_len: int = 5
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.start < NUM_SPECIAL:
            raise ValueError("language ids must lie above the special tokens")
        if self.size < ROLE_SIZE + 8:
            raise ValueError(f"language block must hold at least {ROLE_SIZE + 8} tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("bad sentence length range")

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.start, self.stop)

    def contains(self, token: int) -> bool:
        return self.start <= token < self.stop

    # roles -----------------------------------------------------------------
    def marker(self, k: int) -> int:
        return self.start + k

    def entity_token(self, etype: int, k: int) -> int:
        """Entity token ``k`` of a type: heads first, then tails."""
        return self.start + NUM_MARKERS + etype * (HEADS_PER_TYPE + TAILS_PER_TYPE) + k

    def content(self, k: int) -> int:
        return self.start + ROLE_SIZE - NUM_CONTENT + k

    def content_of_type(self, atype: int, k: int) -> int:
        return self.content(atype * CONTENT_PER_TYPE + k)

    def content_type(self, token: int) -> Optional[int]:
        k = token - self.start - (ROLE_SIZE - NUM_CONTENT)
        return k // CONTENT_PER_TYPE if 0 <= k < NUM_CONTENT else None

    @property
    def filler_ids(self) -> np.ndarray:
        return np.arange(self.start + ROLE_SIZE, self.stop)

    def marker_index(self, token: int) -> Optional[int]:
        k = token - self.start
        return k if 0 <= k < NUM_MARKERS else None

    def entity_role(self, token: int) -> Optional[tuple[int, bool]]:
        """``(type, is_head)`` for entity tokens, else None."""
        k = token - self.start - NUM_MARKERS
        per = HEADS_PER_TYPE + TAILS_PER_TYPE
        if not 0 <= k < NUM_ENTITY_TYPES * per:
            return None
        return k // per, k % per < HEADS_PER_TYPE

    # grammar ---------------------------------------------------------------
    def profile(self) -> np.ndarray:
        """Unigram probabilities over the block: tiered Zipf on a seeded ranking."""
        rank = np.random.default_rng(_seed(self.seed, self.tag, "rank")).permutation(self.size)
        weights = 1.0 / (rank // self.tier + 1.0) ** self.zipf
        return weights / weights.sum()

    def successor(self) -> np.ndarray:
        """Token-to-token map (block offsets) that links consecutive sentences.

        It permutes tokens within each frequency tier without fixed points, so the
        unigram profile is preserved exactly.
        """
        p = self.profile()
        rng = np.random.default_rng(_seed(self.seed, self.tag, "succ"))
        succ = np.arange(self.size)
        for value in np.unique(p):
            members = np.flatnonzero(p == value)
            if members.size > 1:
                shift = rng.permutation(members)
                succ[shift] = np.roll(shift, 1)
        return succ

    def filler_probs(self) -> np.ndarray:
        p = self.profile()[ROLE_SIZE:]
        return p / p.sum()


def make_languages(tags: Sequence[str], size: int = 120, seed: int = 0, **kw) -> list[LanguageSpec]:
    """Consecutive, disjoint blocks starting right after the special tokens."""
    out, start = [], NUM_SPECIAL
    for tag in tags:
        out.append(LanguageSpec(tag, start, size, seed=seed, **kw))
        start += size
    return out


def vocab_size(langs: Iterable[LanguageSpec]) -> int:
    return max([NUM_SPECIAL] + [lang.stop for lang in langs])


# ----------------------------------------------------------------- text form


class Vocabulary:
    """Bijection between token ids and word strings such as ``en017``."""

    def __init__(self, langs: Sequence[LanguageSpec]):
        self.langs = list(langs)
        self.size = vocab_size(self.langs)
        self._words: dict[int, str] = dict(enumerate(SPECIAL_WORDS))
        for lang in self.langs:
            for i in range(lang.size):
                self._words[lang.start + i] = f"{lang.tag}{i:03d}"
        self._ids = {w: i for i, w in self._words.items()}

    def word(self, token: int) -> str:
        try:
            return self._words[int(token)]
        except KeyError:
            raise KeyError(f"unknown token id {token}") from None

    def token(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise KeyError(f"unknown word {word!r}") from None

    def language_of(self, token: int) -> Optional[str]:
        for lang in self.langs:
            if lang.contains(int(token)):
                return lang.tag
        return None

    def tokenize(self, text_a: str, text_b: Optional[str] = None, max_len: int = 32):
        ids_a = [self.token(w) for w in text_a.split()]
        ids_b = None if text_b is None else [self.token(w) for w in text_b.split()]
        return encode_pair(ids_a, ids_b, max_len)

    def detokenize(self, ids: Iterable[int], keep_special: bool = False) -> str:
        words = []
        for t in ids:
            t = int(t)
            if t == PAD_ID:
                continue
            if t < NUM_SPECIAL and not keep_special:
                continue
            words.append(self.word(t))
        return " ".join(words)


def encode_pair(ids_a: Sequence[int], ids_b: Optional[Sequence[int]], max_len: int):
    """``[CLS] a [SEP] (b [SEP])`` padded to ``max_len``.

    Overlong single segments keep their first ``max_len - 2`` tokens; pairs drop
    tokens from the longer segment's end.  Returns ``(ids, attention, segments)``.
    """
    a, b = list(ids_a), None if ids_b is None else list(ids_b)
    if b is None:
        a = a[: max_len - 2]
    else:
        while len(a) + len(b) + 3 > max_len:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
    seq = [CLS_ID] + a + [SEP_ID]
    seg = [0] * len(seq)
    if b is not None:
        seq += b + [SEP_ID]
        seg += [1] * (len(b) + 1)
    n = len(seq)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[:n] = seq
    attn = np.zeros(max_len, dtype=np.int64)
    attn[:n] = 1
    segs = np.zeros(max_len, dtype=np.int64)
    segs[:n] = seg
    return ids, attn, segs


# ----------------------------------------------------------------- corpora


def generate_corpus(lang: LanguageSpec, num_docs: int, seed: int, sentences=(2, 5)) -> list[list[list[int]]]:
    """Documents of sentences drawn from the language profile.

    Sentences are i.i.d. unigram draws, except that each non-initial sentence
    opens with the successor of the previous sentence's last token.
    """
    if num_docs < 1:
        raise ValueError("num_docs must be >= 1")
    rng = np.random.default_rng(_seed(seed, lang.tag, lang.seed, "corpus"))
    p = lang.profile()
    succ = lang.successor()
    docs = []
    for _ in range(num_docs):
        doc = []
        for s in range(int(rng.integers(sentences[0], sentences[1] + 1))):
            n = int(rng.integers(lang.min_len, lang.max_len + 1))
            offs = rng.choice(lang.size, size=n, p=p)
            if s > 0:
                offs[0] = succ[doc[-1][-1] - lang.start]
            doc.append([int(o) + lang.start for o in offs])
        docs.append(doc)
    return docs


# ----------------------------------------------------------------- tasks


@dataclass(frozen=True)
class Example:
    a: tuple
    b: Optional[tuple]
    label: object  # int | tuple of tags (per token of a) | (start, end) within b


def _relation(x: int, y: int) -> str:
    if x == y:
        return "same"
    return "opposite" if x // 2 == y // 2 else "other"


PAIR_RULES = {
    # label index -> admissible relations
    3: (("same",), ("opposite",), ("other",)),
    2: (("other", "opposite"), ("same",)),
}
PARAPHRASE_RULE = (("other",), ("same", "opposite"))


def pair_label(x: int, y: int, rule) -> int:
    rel = _relation(x, y)
    for label, rels in enumerate(rule):
        if rel in rels:
            return label
    raise AssertionError(rel)


@dataclass(frozen=True)
class TaskRecipe:
    """What a synthetic dataset looks like; stands in for one real benchmark."""

    task_id: str
    task_type: TaskType
    language: str
    num_classes: int
    train_size: int
    dev_size: int
    rule: str = "default"  # pair tasks: "default" or "paraphrase"

    def pair_rule(self):
        if self.rule == "paraphrase":
            return PARAPHRASE_RULE
        return PAIR_RULES[self.num_classes]


def _fillers(lang: LanguageSpec, rng, n: int) -> list[int]:
    return [int(t) for t in rng.choice(lang.filler_ids, size=n, p=lang.filler_probs())]


def _gen_classification(lang, rng, label: int) -> Example:
    n = int(rng.integers(lang.min_len, lang.max_len + 1))
    toks = _fillers(lang, rng, n - 1)
    toks.insert(int(rng.integers(0, n)), lang.marker(label))
    return Example(tuple(toks), None, label)


def _gen_pair(lang, rng, label: int, rule) -> Example:
    x = int(rng.integers(NUM_MARKERS))
    options = [y for y in range(NUM_MARKERS) if _relation(x, y) in rule[label]]
    y = options[int(rng.integers(len(options)))]
    segs = []
    for marker in (x, y):
        n = int(rng.integers(4, 9))
        toks = _fillers(lang, rng, n - 1)
        toks.insert(int(rng.integers(0, n)), lang.marker(marker))
        segs.append(tuple(toks))
    return Example(segs[0], segs[1], label)


def _gen_tagging(lang, rng) -> Example:
    n_ent = int(rng.integers(1, 4))
    pieces: list[tuple[list[int], list[int]]] = []
    for _ in range(n_ent):
        etype = int(rng.integers(NUM_ENTITY_TYPES))
        length = int(rng.integers(1, 4))
        toks = [lang.entity_token(etype, int(rng.integers(HEADS_PER_TYPE)))]
        toks += [lang.entity_token(etype, HEADS_PER_TYPE + int(rng.integers(TAILS_PER_TYPE))) for _ in range(length - 1)]
        tags = [1 + 2 * etype] + [2 + 2 * etype] * (length - 1)
        pieces.append((toks, tags))
    # fillers between and around entities, at least one between neighbours
    gaps = [int(rng.integers(0, 3))] + [int(rng.integers(1, 3)) for _ in range(n_ent - 1)]
    gaps.append(int(rng.integers(0, 3)))
    toks, tags = [], []
    for i, (etoks, etags) in enumerate(pieces):
        toks += _fillers(lang, rng, gaps[i])
        tags += [0] * gaps[i]
        toks += etoks
        tags += etags
    toks += _fillers(lang, rng, gaps[-1])
    tags += [0] * gaps[-1]
    return Example(tuple(toks), None, tuple(tags))


def _gen_span(lang, rng, n_phrases: int = 3) -> Example:
    """Question names an answer type by its marker; the context holds one phrase per type."""
    types = rng.choice(NUM_ANSWER_TYPES, size=n_phrases, replace=False)
    answer = int(rng.integers(n_phrases))
    question = [lang.marker(int(types[answer]))] + _fillers(lang, rng, int(rng.integers(1, 3)))
    context: list[int] = []
    span = None
    for i, atype in enumerate(types):
        context += _fillers(lang, rng, int(rng.integers(1, 3)))
        length = int(rng.integers(1, 4))
        if i == answer:
            span = (len(context), len(context) + length - 1)
        context += [lang.content_of_type(int(atype), int(rng.integers(CONTENT_PER_TYPE))) for _ in range(length)]
    context += _fillers(lang, rng, int(rng.integers(1, 3)))
    return Example(tuple(question), tuple(context), span)


def _balanced_labels(n: int, k: int, rng) -> np.ndarray:
    labels = np.resize(np.arange(k), n)
    return rng.permutation(labels)


def _generate(recipe: TaskRecipe, lang: LanguageSpec, n: int, rng) -> list[Example]:
    tt = recipe.task_type
    if tt is TaskType.CLASSIFICATION:
        if recipe.num_classes > NUM_MARKERS:
            raise ValueError(f"at most {NUM_MARKERS} classes supported")
        return [
            _gen_classification(lang, rng, int(y))
            for y in _balanced_labels(n, recipe.num_classes, rng)
        ]
    if tt is TaskType.PAIR_CLASSIFICATION:
        rule = recipe.pair_rule()
        return [_gen_pair(lang, rng, int(y), rule) for y in _balanced_labels(n, len(rule), rng)]
    if tt is TaskType.TOKEN_CLASSIFICATION:
        return [_gen_tagging(lang, rng) for _ in range(n)]
    if tt is TaskType.SPAN_EXTRACTION:
        return [_gen_span(lang, rng) for _ in range(n)]
    raise ValueError(f"unsupported task family {tt.value}")


def _key(ex: Example) -> tuple:
    return (ex.a, ex.b)


@dataclass
class TaskDataset:
    task_id: str
    task_type: TaskType
    language: str
    num_classes: int
    splits: dict = field(default_factory=dict)  # split name -> list[Example]
    label_scheme: tuple = ()

    def __len__(self) -> int:
        return len(self.splits.get("train", ()))

    def size(self, split: str) -> int:
        return len(self.splits[split])

    def features(self, split: str, max_len: int) -> dict:
        """Padded arrays for a split: ids, attention, segments, labels."""
        return examples_to_arrays(self.splits[split], self.task_type, max_len)

    def batch(self, split: str, index: Sequence[int], max_len: int, cache: Optional[dict] = None) -> Batch:
        feats = cache if cache is not None else self.features(split, max_len)
        idx = np.asarray(index)
        return Batch(
            self.task_id,
            feats["token_ids"][idx],
            feats["attention_mask"][idx],
            feats["segment_ids"][idx],
            feats["labels"][idx],
        )


def examples_to_arrays(examples: Sequence[Example], task_type: TaskType, max_len: int) -> dict:
    n = len(examples)
    ids = np.zeros((n, max_len), dtype=np.int64)
    attn = np.zeros((n, max_len), dtype=np.int64)
    seg = np.zeros((n, max_len), dtype=np.int64)
    if task_type in (TaskType.TOKEN_CLASSIFICATION, TaskType.MLM):
        labels = np.full((n, max_len), IGNORE, dtype=np.int64)
    elif task_type is TaskType.SPAN_EXTRACTION:
        labels = np.zeros((n, 2), dtype=np.int64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        ids[i], attn[i], seg[i] = encode_pair(ex.a, ex.b, max_len)
        if task_type is TaskType.TOKEN_CLASSIFICATION:
            kept = int(attn[i].sum()) - 2
            labels[i, 1 : 1 + kept] = ex.label[:kept]
        elif task_type is TaskType.SPAN_EXTRACTION:
            offset = len(ex.a) + 2
            s, e = ex.label[0] + offset, ex.label[1] + offset
            if e >= int(attn[i].sum()) - 1:
                raise ValueError(f"answer span of example {i} truncated at max_len={max_len}")
            labels[i] = (s, e)
        else:
            labels[i] = ex.label
    return {"token_ids": ids, "attention_mask": attn, "segment_ids": seg, "labels": labels}


def _label_scheme(recipe: TaskRecipe) -> tuple:
    tt = recipe.task_type
    if tt is TaskType.TOKEN_CLASSIFICATION:
        return ("O",) + tuple(f"{p}-{t}" for t in ENTITY_TYPES for p in "BI")
    if tt is TaskType.PAIR_CLASSIFICATION:
        return tuple("|".join(r) for r in recipe.pair_rule())
    if tt is TaskType.SPAN_EXTRACTION:
        return ("start", "end")
    return tuple(f"class{k}" for k in range(recipe.num_classes))


def generate_task_dataset(recipe: TaskRecipe, lang: LanguageSpec, seed: int) -> TaskDataset:
    """Train/dev splits without exact duplicates inside or across splits."""
    if recipe.language != lang.tag:
        raise ValueError(f"recipe {recipe.task_id!r} is {recipe.language}, language spec is {lang.tag}")
    if recipe.task_type is TaskType.TOKEN_CLASSIFICATION and recipe.num_classes != 1 + 2 * NUM_ENTITY_TYPES:
        raise ValueError(f"tagging tasks use {1 + 2 * NUM_ENTITY_TYPES} BIO tags")
    rng = np.random.default_rng(_seed(seed, recipe.task_id, lang.tag, lang.seed, "task"))
    seen: set = set()
    splits = {}
    for split, n in (("train", recipe.train_size), ("dev", recipe.dev_size)):
        out: list[Example] = []
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 50:
                raise RuntimeError(f"cannot draw {n} distinct {recipe.task_id} examples")
            for ex in _generate(recipe, lang, n - len(out), rng):
                if _key(ex) not in seen:
                    seen.add(_key(ex))
                    out.append(ex)
        splits[split] = out
    return TaskDataset(
        recipe.task_id, recipe.task_type, recipe.language, recipe.num_classes, splits, _label_scheme(recipe)
    )


# ----------------------------------------------------------------- rule decoder


def rule_decode(ex: Example, recipe: TaskRecipe, lang: LanguageSpec):
    """Recover the label from the tokens alone (inverse of the generator)."""
    tt = recipe.task_type
    if tt is TaskType.CLASSIFICATION:
        return next(lang.marker_index(t) for t in ex.a if lang.marker_index(t) is not None)
    if tt is TaskType.PAIR_CLASSIFICATION:
        x = next(lang.marker_index(t) for t in ex.a if lang.marker_index(t) is not None)
        y = next(lang.marker_index(t) for t in ex.b if lang.marker_index(t) is not None)
        return pair_label(x, y, recipe.pair_rule())
    if tt is TaskType.TOKEN_CLASSIFICATION:
        tags = []
        for t in ex.a:
            role = lang.entity_role(t)
            tags.append(0 if role is None else 2 * role[0] + (1 if role[1] else 2))
        return tuple(tags)
    if tt is TaskType.SPAN_EXTRACTION:
        atype = next(lang.marker_index(t) for t in ex.a if lang.marker_index(t) is not None)
        hits = [i for i, t in enumerate(ex.b) if lang.content_type(t) == atype]
        return (hits[0], hits[-1])
    raise ValueError(f"no rule decoder for {tt.value}")


# ----------------------------------------------------------------- self-supervised batches


def mlm_batch(
    task_id: str,
    docs: Sequence[Sequence[Sequence[int]]],
    rng: np.random.Generator,
    batch_size: int,
    max_len: int,
    vocab: int,
    rate: float = 0.15,
) -> Batch:
    """Mask ``rate`` of non-special tokens: 80% [MASK], 10% random, 10% kept.

    Each row gets at least one target so every batch has a loss.
    """
    rows = []
    for _ in range(batch_size):
        doc = docs[int(rng.integers(len(docs)))]
        s = int(rng.integers(len(doc)))
        sent = list(doc[s])
        if s + 1 < len(doc):
            sent += list(doc[s + 1])
        rows.append(encode_pair(sent, None, max_len))
    ids = np.stack([r[0] for r in rows])
    attn = np.stack([r[1] for r in rows])
    seg = np.stack([r[2] for r in rows])
    ids, labels = mask_tokens(ids, rng, vocab, rate)
    return Batch(task_id, ids, attn, seg, labels)


def mask_tokens(ids: np.ndarray, rng: np.random.Generator, vocab: int, rate: float = 0.15):
    ids = ids.copy()
    maskable = ids >= NUM_SPECIAL
    chosen = (rng.random(ids.shape) < rate) & maskable
    for i in range(ids.shape[0]):
        if not chosen[i].any():
            cand = np.flatnonzero(maskable[i])
            chosen[i, cand[int(rng.integers(cand.size))]] = True
    labels = np.where(chosen, ids, IGNORE)
    action = rng.random(ids.shape)
    random_tokens = rng.integers(NUM_SPECIAL, vocab, size=ids.shape)
    ids = np.where(chosen & (action < 0.8), MASK_ID, ids)
    ids = np.where(chosen & (action >= 0.8) & (action < 0.9), random_tokens, ids)
    return ids, labels


def nsp_batch(
    task_id: str,
    docs: Sequence[Sequence[Sequence[int]]],
    rng: np.random.Generator,
    batch_size: int,
    max_len: int,
) -> Batch:
    """Label 0: b follows a in its document; label 1: b is from another document."""
    rows, labels = [], []
    for _ in range(batch_size):
        while True:
            d = int(rng.integers(len(docs)))
            if len(docs[d]) >= 2:
                break
        s = int(rng.integers(len(docs[d]) - 1))
        first = docs[d][s]
        if rng.random() < 0.5 or len(docs) < 2:
            second, label = docs[d][s + 1], 0
        else:
            o = int(rng.integers(len(docs) - 1))
            o = o + 1 if o >= d else o
            second, label = docs[o][int(rng.integers(len(docs[o])))], 1
        rows.append(encode_pair(first, second, max_len))
        labels.append(label)
    return Batch(
        task_id,
        np.stack([r[0] for r in rows]),
        np.stack([r[1] for r in rows]),
        np.stack([r[2] for r in rows]),
        np.array(labels, dtype=np.int64),
    )


# ----------------------------------------------------------------- serialization


def save_dataset(ds: TaskDataset, path: Union[str, Path], max_len: int) -> None:
    """One JSON record per example: task_id, split, token_ids, attention_mask, segment_ids, label."""
    path = Path(path)
    with path.open("w") as fh:
        for split in ds.splits:
            feats = ds.features(split, max_len)
            for i in range(ds.size(split)):
                rec = {
                    "task_id": ds.task_id,
                    "task_type": ds.task_type.value,
                    "language": ds.language,
                    "num_classes": ds.num_classes,
                    "split": split,
                    "token_ids": feats["token_ids"][i].tolist(),
                    "attention_mask": feats["attention_mask"][i].tolist(),
                    "segment_ids": feats["segment_ids"][i].tolist(),
                    "label": np.asarray(feats["labels"][i]).tolist(),
                }
                fh.write(json.dumps(rec) + "\n")


def load_feature_records(path: Union[str, Path]) -> dict:
    """Read a dataset file back into ``{split: feature arrays}``."""
    by_split: dict = {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        by_split.setdefault(rec["split"], []).append(rec)
    out = {}
    for split, recs in by_split.items():
        out[split] = {
            "token_ids": np.array([r["token_ids"] for r in recs], dtype=np.int64),
            "attention_mask": np.array([r["attention_mask"] for r in recs], dtype=np.int64),
            "segment_ids": np.array([r["segment_ids"] for r in recs], dtype=np.int64),
            "labels": np.array([r["label"] for r in recs], dtype=np.int64),
        }
    return out
